def pytest_terminal_summary(terminalreporter):
    # acceptance verdicts recorded through record_property("acceptance", ...)
    lines = []
    for kind in ("passed", "failed"):
        for rep in terminalreporter.getreports(kind):
            for key, value in getattr(rep, "user_properties", ()):
                if key == "acceptance":
                    lines.append(value)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(set(lines), key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
