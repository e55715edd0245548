#include <stdio.h>
#include <string.h>
#include "infdist.h"

int main(void) {
    double p[4] = {0.3, -0.1, 0.7, 0.2};
    IdfSolution *s = NULL;
    bool exact = false;
    if (idf_tune_lambda(p, 4, 2, 100, &s, &exact) != IDF_STATUS_OK) {
        fprintf(stderr, "%s\n", idf_last_error());
        return 1;
    }
    const double *w = idf_solution_weights(s);
    printf("%s %d %zu %.6f %.6f %.6f %.6f\n", idf_version(), exact, idf_solution_support_len(s),
           w[0], w[1], w[2], w[3]);
    idf_solution_free(s);

    IdfMatrix *m = NULL;
    if (idf_matrix_from_data(1, 2, NULL, &m) != IDF_STATUS_NULL_POINTER) return 2;
    printf("%s\n", idf_last_error());
    return 0;
}
