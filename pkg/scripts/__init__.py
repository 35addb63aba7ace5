# Benchmark drivers; importable so the slow tests can reuse them.
