/* C interface to the PMI/MITR toolkit.
 *
 * Opaque handles + integer status codes. All functions returning int use:
 *   0 = success, 2 = configuration error, 3 = data error, 1 = other failure.
 * pmi_last_error() returns a thread-local message for the last failure.
 */
#ifndef PMI_H
#define PMI_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define PMI_OK 0
#define PMI_ERR_INTERNAL 1
#define PMI_ERR_CONFIG 2
#define PMI_ERR_DATA 3

typedef struct pmi_config pmi_config;

const char* pmi_version(void);
const char* pmi_last_error(void);

/* Configuration ----------------------------------------------------- */

/* NULL on unknown preset name ("babi", "triangles"). */
pmi_config* pmi_config_preset(const char* name);
pmi_config* pmi_config_default(void);
pmi_config* pmi_config_from_file(const char* path);
void pmi_config_free(pmi_config* cfg);

int pmi_config_set(pmi_config* cfg, const char* key, const char* value);
/* Writes the value into buf (NUL-terminated, truncated to cap). */
int pmi_config_get(const pmi_config* cfg, const char* key, char* buf, size_t cap);
int pmi_config_validate(const pmi_config* cfg);
/* Canonical `key = value` text. */
int pmi_config_text(const pmi_config* cfg, char* buf, size_t cap);

/* Runs --------------------------------------------------------------- */

/* Trains per config; writes metrics.csv and checkpoint.pmk under out_dir. */
int pmi_train(const pmi_config* cfg, const char* data_dir, const char* out_dir);

/* Evaluates a checkpoint on a split ("train"|"valid"|"test"); writes a JSON
 * metrics object into buf. */
int pmi_evaluate(const char* checkpoint, const char* data_dir, const char* split, char* buf, size_t cap);

/* Exports head-averaged attention matrices + manifest.json into out_dir. */
int pmi_dump_traces(const char* checkpoint, const char* data_dir, const char* out_dir, int per_head);

/* Generates triangle datasets (train/valid/test.tri) into out_dir. */
int pmi_gen_triangles(const pmi_config* cfg, const char* out_dir);

/* Full-model gradient check against central finite differences; uses the
 * config's model at 64-bit. Writes the report into buf when non-NULL. */
int pmi_grad_check(const pmi_config* cfg, double h, double tol, double* max_rel_err, char* buf, size_t cap);

/* Per-component trainable-parameter table (shared and per_layer modes). */
int pmi_count_params(const pmi_config* cfg, char* buf, size_t cap);

#ifdef __cplusplus
}
#endif

#endif /* PMI_H */
