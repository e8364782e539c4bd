from acceptance_log import RESULTS, TITLES


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for c, title in TITLES.items():
        if c in RESULTS:
            ok, detail = RESULTS[c]
            tr.write_line(f"criterion {c} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else ""))
        else:
            tr.write_line(f"criterion {c} NOT RUN: {title}")
