#include <math.h>
#include <stdio.h>
#include <string.h>

#include "pagbox.h"

#define CHECK(cond)                                                    \
    do {                                                               \
        if (!(cond)) {                                                 \
            const char *e = pagbox_last_error();                       \
            fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__,    \
                    #cond, e ? e : "no error");                        \
            return 1;                                                  \
        }                                                              \
    } while (0)

int main(int argc, char **argv) {
    if (argc != 3) {
        fprintf(stderr, "usage: smoke GT PRED\n");
        return 2;
    }
    PagboxCuboid box = {{0.5, -0.2, 6.0}, {2.0, 1.0, 4.0}, {1, 0, 0, 0, 1, 0, 0, 0, 1}};
    double pts[24];
    CHECK(pagbox_cuboid_corners(&box, pts) == PAGBOX_STATUS_OK);

    PagboxCuboid fit;
    CHECK(pagbox_rectify(pts, &fit) == PAGBOX_STATUS_OK);
    double iou = 0.0;
    CHECK(pagbox_iou3d(&box, &fit, &iou) == PAGBOX_STATUS_OK);
    CHECK(fabs(iou - 1.0) < 1e-9);

    PagboxIntrinsics k = {700.0, 700.0, 320.0, 240.0};
    double uv[16], d[8], pag_uv = -1.0, pag_d = -1.0;
    CHECK(pagbox_project(pts, &k, uv, d) == PAGBOX_STATUS_OK);
    CHECK(pagbox_pag(uv, d, uv, d, &pag_uv, &pag_d) == PAGBOX_STATUS_OK);
    CHECK(pag_uv == 0.0 && pag_d == 0.0);

    double cost[64];
    for (int r = 0; r < 8; r++)
        for (int c = 0; c < 8; c++)
            cost[r * 8 + c] = (r == (c + 3) % 8) ? 0.0 : 1.0 + r + c;
    uint32_t assign[8];
    double total = -1.0;
    CHECK(pagbox_hungarian(cost, assign, &total) == PAGBOX_STATUS_OK);
    CHECK(total == 0.0);
    for (int r = 0; r < 8; r++) CHECK(assign[r] == (uint32_t)((r + 5) % 8));

    CHECK(pagbox_rectify(NULL, &fit) == PAGBOX_STATUS_NULL_POINTER);
    CHECK(pagbox_last_error() != NULL);

    PagboxReport *report = NULL;
    CHECK(pagbox_evaluate_files(argv[1], argv[2], &report) == PAGBOX_STATUS_OK);
    PagboxAggregate g;
    CHECK(pagbox_report_global(report, &g) == PAGBOX_STATUS_OK);
    CHECK(g.instances > 0 && g.pag_uv == 0.0 && fabs(g.iou3d - 1.0) < 1e-9);
    char *json = pagbox_report_json(report);
    CHECK(json != NULL && strstr(json, "\"global\"") != NULL);
    pagbox_string_free(json);
    pagbox_report_free(report);

    CHECK(pagbox_evaluate_files("/nonexistent/gt.jsonl", argv[2], &report) == PAGBOX_STATUS_IO);
    CHECK(report == NULL);

    printf("ok %s\n", pagbox_version());
    return 0;
}
