"""Outcome of each acceptance criterion, collected for the end-of-run summary."""
from contextlib import contextmanager

RESULTS: dict[int, tuple[str, str, str]] = {}


@contextmanager
def criterion(number: int, title: str):
    """Record PASS or FAIL for ``number``; the body may fill ``detail['text']``."""
    detail = {"text": ""}
    try:
        yield detail
    except BaseException:
        RESULTS[number] = ("FAIL", title, detail["text"])
        print(line(number))
        raise
    RESULTS[number] = ("PASS", title, detail["text"])
    print(line(number))


def line(number: int) -> str:
    status, title, text = RESULTS[number]
    return f"criterion {number:2d} {status}: {title}" + (f" ({text})" if text else "")
