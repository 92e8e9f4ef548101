#ifndef IWD_C_H
#define IWD_C_H

/* C interface to the patch-transport library. All functions return a status
 * code; on failure iwd_last_error() describes the problem (thread-local).
 * Strings produced by the library are heap-allocated and must be released
 * with iwd_string_free(). Handles are opaque and freed by their *_free().
 */

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum iwd_status {
    IWD_OK = 0,
    IWD_ERR_VALIDATION = 2, /* bad arguments, malformed config */
    IWD_ERR_NUMERIC = 3,    /* solver failed to converge or diverged */
    IWD_ERR_IO = 4          /* missing or unreadable/unwritable files */
} iwd_status;

/* Message for the most recent failure on this thread; never NULL. */
const char* iwd_last_error(void);

void iwd_string_free(char* s);

typedef struct iwd_image iwd_image;
typedef struct iwd_dataset iwd_dataset;
typedef struct iwd_model iwd_model;

/* --- images (PGM P5 / PPM P6, maxval 255) ------------------------------- */

iwd_status iwd_image_load(const char* path, iwd_image** out);
iwd_status iwd_image_save(const iwd_image* img, const char* path);
iwd_status iwd_image_shape(const iwd_image* img, int* height, int* width, int* channels);
void iwd_image_free(iwd_image* img);

/* Distance between the patch distributions of two images.
 * options_json keys (all optional):
 *   solver: "exact" | "sinkhorn" | "dual"   (default "exact")
 *   kernel, stride: patch grid              (default 3, 3)
 *   epsilon, max_iterations, tolerance      (sinkhorn; epsilon<=0 = 0.05*max cost)
 *   lambda, steps, seed                     (dual critic)
 * The report is {"solver","value","n","m","marginal_error","iterations"}.
 */
iwd_status iwd_distance(const iwd_image* a, const iwd_image* b, const char* options_json,
                        char** report_json);

/* --- datasets ------------------------------------------------------------
 * spec is either
 *   "synth:classes=2,per_class=100,height=12,width=12,sigma=0.05,contrast=0.09,seed=0"
 * or
 *   "idx:IMAGES_PATH,LABELS_PATH"
 * Relative IDX paths are also tried under $IWD_DATA_DIR.
 */
iwd_status iwd_dataset_open(const char* spec, iwd_dataset** out);
iwd_status iwd_dataset_info(const iwd_dataset* ds, size_t* count, int* classes);
iwd_status iwd_dataset_save_idx(const iwd_dataset* ds, const char* images_path,
                                const char* labels_path);
void iwd_dataset_free(iwd_dataset* ds);

/* --- models -------------------------------------------------------------- */

iwd_status iwd_model_load(const char* path, iwd_model** out);
iwd_status iwd_model_save(const iwd_model* m, const char* path);
iwd_status iwd_model_predict(const iwd_model* m, const iwd_image* img, int* label);
void iwd_model_free(iwd_model* m);

/* Train a classifier on the dataset.
 * options_json keys: method ("iwdd"|"natural"), beta, tau, epochs, batch, lr,
 * seed, eps_w (<=0 derives the stock budget from the data), inner_iterations,
 * n_critic, inner_lr. Report: {"method","train_accuracy","epochs_completed",
 * "skipped_batches","config_hash"}.
 */
iwd_status iwd_defend_run(const iwd_dataset* ds, const char* options_json, iwd_model** out_model,
                          char** report_json);

/* Attack the model over (a subset of) the dataset.
 * options_json keys: attacker ("iwda"|"iwda_primal"|"fgsm"|"pgd"), mode
 * ("untargeted"|"targeted"), target, tau, lambda, n_critic, iterations,
 * eps_w (<=0 = stock budget), init_noise, lr, seed, limit, eps, alpha, k.
 * Report: {"attacker","asr","clean_accuracy","budget_eps_w","per_image":[...]}.
 */
iwd_status iwd_attack_run(const iwd_model* m, const iwd_dataset* ds, const char* options_json,
                          char** report_json);

/* Accuracy table under a list of attackers.
 * options_json keys: attacks (array from "clean","fgsm","pgd10","iwda"),
 * beta, seed, eps_w, limit, tau. Report: {"clean_accuracy",
 * "adversarial_accuracy":{...},"empirical_risk","beta","samples","csv"}.
 */
iwd_status iwd_eval_run(const iwd_model* m, const iwd_dataset* ds, const char* options_json,
                        char** report_json);

/* Run a named experiment from a config document (see the experiment schema in
 * the README). outputs_json lists the files written: {"outputs":[...]}.
 */
iwd_status iwd_experiment_run(const char* config_json, char** outputs_json);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* IWD_C_H */
