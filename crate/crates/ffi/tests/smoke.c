#include <math.h>
#include <stdio.h>
#include <string.h>

#include "grad.h"

int main(void) {
    double rewards[3] = {1.0, 2.0, 3.0};
    double rtg[3];
    if (grad_compute_rtg(rewards, 3, rtg) != GRAD_STATUS_OK || rtg[0] != 6.0 || rtg[2] != 3.0) {
        fprintf(stderr, "rtg\n");
        return 1;
    }
    if (fabs(grad_penalty(30.0, 15.0, 1.0, 2.0) - 0.25) > 1e-12) {
        fprintf(stderr, "penalty\n");
        return 1;
    }
    char *json = NULL;
    const char *inst = "{\"impressions\":[{\"value\":1,\"cost\":1}],\"budget\":2}";
    if (grad_oracle_solve_json(inst, &json) != GRAD_STATUS_OK || strstr(json, "true") == NULL) {
        fprintf(stderr, "oracle\n");
        return 1;
    }
    grad_string_free(json);
    GradModel *model = NULL;
    if (grad_model_load("/nonexistent", &model) != GRAD_STATUS_CHECKPOINT || grad_last_error() == NULL) {
        fprintf(stderr, "load\n");
        return 1;
    }
    printf("ok\n");
    return 0;
}
