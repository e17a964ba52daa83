/* Loads a checkpoint given on the command line and certifies the all-0.5 input. */
#include <stdio.h>
#include <stdlib.h>

#include "certattack.h"

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: %s model.json\n", argv[0]);
        return 2;
    }
    CaModel *model = NULL;
    if (ca_model_load(argv[1], &model) != CaStatus_Ok) {
        char msg[256];
        ca_last_error(msg, sizeof msg);
        fprintf(stderr, "load failed: %s\n", msg);
        return 1;
    }
    size_t d = ca_model_input_dim(model);
    double *x = malloc(d * sizeof *x);
    for (size_t i = 0; i < d; i++) x[i] = 0.5;
    CaSmoothingParams p = {0.25, 500, 0.001, 1};
    CaVerdict v;
    CaStatus st = ca_certify(model, x, d, &p, &v);
    if (st == CaStatus_Ok) printf("class %u radius %.6f\n", v.class_index, v.radius);
    if (ca_predict(model, x, d + 1, &v.class_index) != CaStatus_ShapeMismatch) st = CaStatus_Internal;
    free(x);
    ca_model_free(model);
    return st == CaStatus_Ok ? 0 : 1;
}
