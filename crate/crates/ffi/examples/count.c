#include <math.h>
#include <stdio.h>
#include "zpg.h"

int main(void) {
    ZpgNetwork *net = NULL;
    if (zpg_network_new_two_level(1.0, 10.0 * M_PI, 2.0, 0.0, &net) != ZPG_STATUS_OK) {
        fprintf(stderr, "%s\n", zpg_last_error_message());
        return 1;
    }
    size_t truncation = 14;
    ZpgDistribution *dist = NULL;
    if (zpg_pn_distribution(net, &truncation, 1, NULL, &dist) != ZPG_STATUS_OK) {
        fprintf(stderr, "%s\n", zpg_last_error_message());
        zpg_network_free(net);
        return 1;
    }
    double probs[14];
    zpg_distribution_probabilities(dist, probs, 14);
    for (size_t n = 0; n < 14; n++) {
        printf("%zu %.12e\n", n, probs[n]);
    }
    zpg_distribution_free(dist);
    zpg_network_free(net);
    return 0;
}
