"""Prints one summary line per acceptance check at the end of a run."""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    seen = set()
    lines = []
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" not in nodeid or nodeid in seen:
                continue
            seen.add(nodeid)
            name = nodeid.split("::")[-1]
            lines.append((name, outcome.upper()))
    if lines:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance checks:")
        for name, outcome in sorted(lines):
            terminalreporter.write_line(f"  {name}: {outcome}")
