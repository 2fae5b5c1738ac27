# Benchmark tests for virm-sim
