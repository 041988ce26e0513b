import re

ACCEPTANCE = re.compile(r"test_acceptance\.py::test_c(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    results = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            m = ACCEPTANCE.search(getattr(rep, "nodeid", ""))
            if not m:
                continue
            entry = results.setdefault(int(m.group(1)), {"names": [], "ok": True, "details": []})
            if m.group(2) not in entry["names"]:
                entry["names"].append(m.group(2))
            entry["ok"] &= key == "passed"
            detail = dict(rep.user_properties).get("detail")
            if detail:
                entry["details"].append(detail)
            elif key != "passed":
                entry["details"].append(f"{m.group(2)} {rep.when} failed")
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        e = results[num]
        line = f"C{num} {' + '.join(e['names'])}: {'PASS' if e['ok'] else 'FAIL'}"
        terminalreporter.write_line(f"{line} ({'; '.join(e['details'])})" if e["details"] else line)
