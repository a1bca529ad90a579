#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include "pointflow.h"

int main(int argc, char **argv) {
    if (argc < 2) return 10;
    PfModel *m = NULL;
    if (pf_model_load("/no/such/file.ckpt", &m) != PF_STATUS_IO || m != NULL) return 11;
    if (pf_last_error()[0] == '\0') return 12;
    if (pf_model_load(argv[1], &m) != PF_STATUS_OK) {
        fprintf(stderr, "%s\n", pf_last_error());
        return 13;
    }
    size_t d = pf_model_dim(m), n = 50;
    double *pts = malloc(n * d * sizeof(double));
    if (pf_model_sample(m, n, 7, pts) != PF_STATUS_OK) return 14;
    for (size_t i = 0; i < n * d; i++)
        if (!isfinite(pts[i])) return 15;
    double cd = -1.0, emd = -1.0;
    if (pf_chamfer(pts, n, pts, n, d, &cd) != PF_STATUS_OK || cd != 0.0) return 16;
    if (pf_emd(pts, pts, n, d, 0.0, &emd) != PF_STATUS_OK || emd != 0.0) return 17;
    printf("%zu %.17g %.17g\n", d, pts[0], pts[1]);
    free(pts);
    pf_model_free(m);
    return 0;
}
