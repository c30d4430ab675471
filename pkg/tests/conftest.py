import pytest


@pytest.fixture
def criterion(record_property):
    """Tag an acceptance test: ``note = criterion(n, title)``; ``note(text)``
    attaches a one-line result shown in the terminal summary."""

    def tag(number, title):
        record_property("criterion", (number, title))

        def note(text):
            record_property("detail", text)
            print(f"criterion {number} ({title}): {text}")

        return note

    return tag


def pytest_terminal_summary(terminalreporter):
    rows = []
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            props = dict(rep.user_properties)
            if "criterion" not in props or rep.when != "call":
                continue
            number, title = props["criterion"]
            rows.append((number, "PASS" if rep.passed else "FAIL", title, props.get("detail", "")))
    if not rows:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, status, title, detail in sorted(rows):
        terminalreporter.write_line(f"{status}  {number:>2}. {title}: {detail}")
