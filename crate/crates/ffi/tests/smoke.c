#include <stdio.h>
#include "repdyn.h"

int main(void) {
    size_t n = 0;
    if (rd_paper_epoch_grid(4000, NULL, 0, &n) != RD_STATUS_BUFFER_TOO_SMALL) return 1;
    uint32_t grid[2000];
    if (rd_paper_epoch_grid(4000, grid, 2000, &n) != RD_STATUS_OK) return 2;

    uint32_t checker[4] = {0, 1, 1, 0};
    size_t frags = 0;
    if (rd_fragment_count(checker, 2, 2, &frags) != RD_STATUS_OK) return 3;

    RdStore *store = NULL;
    if (rd_store_open("/nonexistent/store", &store) == RD_STATUS_OK) return 4;
    if (rd_last_error() == NULL) return 5;

    printf("%zu %u %zu\n", n, grid[n - 1], frags);
    return 0;
}
