/* Fixed-seed xorshift compute loop; last stdout line is a JSON metrics object. */
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>

int main(int argc, char **argv)
{
    long long iterations = argc > 1 ? atoll(argv[1]) : 1000000;
    uint64_t state = argc > 2 ? strtoull(argv[2], NULL, 10) : 42;
    uint64_t acc = 0;
    long long i;

    if (iterations <= 0) {
        fprintf(stderr, "bench: iterations must be positive\n");
        return 2;
    }
    if (state == 0)
        state = 42;
    for (i = 0; i < iterations; i++) {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        acc = (acc ^ (state >> 11)) * 0x9e3779b97f4a7c15ULL + (uint64_t)i;
    }
    printf("bench: done\n");
    printf("{\"checksum\":\"%016llx\",\"ops\":%lld}\n", (unsigned long long)acc, iterations);
    return 0;
}
