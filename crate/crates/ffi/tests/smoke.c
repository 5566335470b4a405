#include <math.h>
#include <stdio.h>
#include "qshadow.h"

int main(void) {
    QsSystem *s = NULL;
    if (qs_system_new("cat", NAN, NAN, &s) != QS_OK) return 1;
    size_t d = 0;
    if (qs_system_dimension(s, &d) != QS_OK) return 2;
    double x[2] = {0.3, 0.7}, e[2];
    if (qs_lyapunov(s, x, d, 10000, e) != QS_OK) return 3;
    if (fabs(e[0] - 0.9624236501192069) > 1e-6) return 4;
    uint32_t k = 0;
    if (qs_classify_block(s, x, d, 50, 64, &k) != QS_OK) return 5;
    double n = 0;
    qs_cat_fixed_count(5, &n);
    if (qs_system_new("nope", NAN, NAN, &s) != QS_ERR_INVALID) return 6;
    char msg[128];
    if (qs_last_error(msg, sizeof msg) != QS_OK) return 7;
    printf("ok %zu %.0f %u\n", d, n, k);
    return 0;
}
