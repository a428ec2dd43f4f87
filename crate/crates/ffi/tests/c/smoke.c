#include <stdio.h>
#include <string.h>
#include "bdnn.h"

int main(void) {
    double t = 0.0;
    if (bdnn_slab_power_transmission(0.02933, 1.0, 0.857, 3, &t) != BDNN_STATUS_OK) return 1;
    if (bdnn_slab_power_transmission(0.02933, 1.0, 0.857, 3, NULL) != BDNN_STATUS_NULL_POINTER) return 2;
    char msg[64];
    size_t n = bdnn_last_error_message(msg, sizeof msg);
    if (n == 0 || strcmp(msg, "out is null") != 0) return 3;
    BdnnTable *table = NULL;
    if (bdnn_table_synthetic(&table) != BDNN_STATUS_OK) return 4;
    bdnn_table_free(table);
    printf("%s %.4f\n", bdnn_version(), t);
    return 0;
}
