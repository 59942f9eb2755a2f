// placeholder, replaced when the benchmark suite lands
#include <benchmark/benchmark.h>
BENCHMARK_MAIN();
