#include <math.h>
#include <stdio.h>
#include <stdlib.h>

#include "survfuse.h"

#define CHECK(cond)                                                   \
    do {                                                              \
        if (!(cond)) {                                                \
            char msg[256];                                            \
            sf_last_error(msg, sizeof msg);                           \
            fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__,   \
                    #cond, msg);                                      \
            return 1;                                                 \
        }                                                             \
    } while (0)

int main(int argc, char **argv) {
    if (argc != 3) {
        fprintf(stderr, "usage: smoke COHORT MODEL\n");
        return 2;
    }

    double theta[3] = {0.0, 0.0, 0.0};
    double times[3] = {1.0, 2.0, 3.0};
    uint8_t events[3] = {1, 1, 1};
    double loss = 0.0;
    CHECK(sf_cox_loss(theta, times, events, 3, &loss) == SF_STATUS_OK);
    CHECK(fabs(loss - log(6.0)) < 1e-12);

    double grad[3];
    CHECK(sf_cox_gradient(theta, times, events, 3, grad) == SF_STATUS_OK);
    CHECK(fabs(grad[0] + grad[1] + grad[2]) < 1e-12);

    double risk[3] = {3.0, 2.0, 1.0};
    double c = 0.0;
    CHECK(sf_concordance_index(risk, times, events, 3, &c) == SF_STATUS_OK);
    CHECK(c == 1.0);

    uint8_t censored[3] = {0, 0, 0};
    CHECK(sf_concordance_index(risk, times, censored, 3, &c) == SF_STATUS_UNDEFINED);
    CHECK(sf_cox_loss(NULL, times, events, 3, &loss) == SF_STATUS_NULL_POINTER);

    CHECK(sf_modulation_factor(1.0) == 1.0);
    SfContribution r;
    CHECK(sf_contribution_ratio(risk, theta, times, events, 3, NULL, &r) == SF_STATUS_OK);
    CHECK(fabs(r.rho_g * r.rho_p - 1.0) < 1e-12);

    SfCohort *cohort = NULL;
    SfModel *model = NULL;
    CHECK(sf_cohort_load(argv[1], &cohort) == SF_STATUS_OK);
    CHECK(sf_model_load(argv[2], &model) == SF_STATUS_OK);
    size_t n = sf_cohort_len(cohort);
    CHECK(n > 0);
    double *scores = malloc(n * sizeof *scores);
    CHECK(sf_model_predict(model, cohort, scores, n) == SF_STATUS_OK);
    double mean_loss = 0.0;
    CHECK(sf_model_evaluate(model, cohort, &c, &mean_loss) == SF_STATUS_OK);
    CHECK(c >= 0.0 && c <= 1.0 && isfinite(mean_loss));
    printf("%zu %.17g %.17g\n", n, c, scores[0]);
    free(scores);
    sf_model_free(model);
    sf_cohort_free(cohort);

    CHECK(sf_cohort_load("/nonexistent/cohort.csv", &cohort) == SF_STATUS_IO);
    CHECK(cohort == NULL);
    return 0;
}
