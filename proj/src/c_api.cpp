#include "iwd/iwd_c.h"

#include <cstdlib>
#include <cstring>
#include <limits>
#include <memory>
#include <sstream>
#include <string>

#include <json.hpp>

#include "iwd/attack.hpp"
#include "iwd/defense.hpp"
#include "iwd/digest.hpp"
#include "iwd/errors.hpp"
#include "iwd/harness.hpp"
#include "iwd/patchdist.hpp"
#include "iwd/rng.hpp"
#include "iwd/transport.hpp"

using nlohmann::json;

struct iwd_image {
    iwd::patchdist::Image img;
};
struct iwd_dataset {
    iwd::harness::Dataset ds;
};
struct iwd_model {
    iwd::defense::TrainedModel m;
};

namespace {

thread_local std::string g_last_error = "no error";

void set_error(const std::string& msg) { g_last_error = msg; }

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out) std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

template <typename F>
iwd_status guard(F&& body) {
    try {
        body();
        return IWD_OK;
    } catch (const iwd::ValidationError& e) {
        set_error(e.what());
        return IWD_ERR_VALIDATION;
    } catch (const iwd::NumericError& e) {
        set_error(e.what());
        return IWD_ERR_NUMERIC;
    } catch (const iwd::IoError& e) {
        set_error(e.what());
        return IWD_ERR_IO;
    } catch (const json::exception& e) {
        set_error(e.what());
        return IWD_ERR_VALIDATION;
    } catch (const std::exception& e) {
        set_error(e.what());
        return IWD_ERR_VALIDATION;
    }
}

json parse_options(const char* options_json) {
    if (!options_json || !*options_json) return json::object();
    json j = json::parse(options_json); // json::exception maps to validation
    if (!j.is_object()) throw iwd::ValidationError("options must be a JSON object");
    return j;
}

iwd::patchdist::PatchGrid grid_from(const json& j) {
    iwd::patchdist::PatchGrid g;
    g.kernel = j.value("kernel", 3);
    g.stride = j.value("stride", g.kernel);
    return g;
}

double resolve_budget(const json& j, const iwd::harness::Dataset& ds,
                      const iwd::patchdist::PatchGrid& grid, std::uint64_t seed) {
    const double eps_w = j.value("eps_w", 0.0);
    if (eps_w > 0.0) return eps_w;
    return iwd::attack::default_budget(ds.images, ds.labels, grid, iwd::rng::mix(seed, 0xB6));
}

// balanced prefix of the dataset for evaluation verbs
struct Subset {
    std::vector<iwd::patchdist::Image> images;
    std::vector<int> labels;
    std::vector<int> indices;
};

Subset take_subset(const iwd::harness::Dataset& ds, int limit) {
    Subset s;
    std::vector<std::vector<int>> buckets(static_cast<std::size_t>(ds.class_count));
    for (std::size_t i = 0; i < ds.size(); ++i)
        buckets[static_cast<std::size_t>(ds.labels[i])].push_back(static_cast<int>(i));
    for (std::size_t round = 0; static_cast<int>(s.indices.size()) < limit; ++round) {
        bool any = false;
        for (auto& b : buckets)
            if (round < b.size() && static_cast<int>(s.indices.size()) < limit) {
                s.indices.push_back(b[round]);
                any = true;
            }
        if (!any) break;
    }
    for (int i : s.indices) {
        s.images.push_back(ds.images[static_cast<std::size_t>(i)]);
        s.labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
    }
    return s;
}

} // namespace

extern "C" {

const char* iwd_last_error(void) { return g_last_error.c_str(); }

void iwd_string_free(char* s) { std::free(s); }

iwd_status iwd_image_load(const char* path, iwd_image** out) {
    return guard([&] {
        if (!path || !out) throw iwd::ValidationError("null argument");
        auto handle = std::make_unique<iwd_image>();
        handle->img = iwd::patchdist::load_image(iwd::harness::resolve_data_path(path));
        *out = handle.release();
    });
}

iwd_status iwd_image_save(const iwd_image* img, const char* path) {
    return guard([&] {
        if (!img || !path) throw iwd::ValidationError("null argument");
        iwd::patchdist::save_image(img->img, path);
    });
}

iwd_status iwd_image_shape(const iwd_image* img, int* height, int* width, int* channels) {
    return guard([&] {
        if (!img) throw iwd::ValidationError("null argument");
        if (height) *height = img->img.height;
        if (width) *width = img->img.width;
        if (channels) *channels = img->img.channels;
    });
}

void iwd_image_free(iwd_image* img) { delete img; }

iwd_status iwd_distance(const iwd_image* a, const iwd_image* b, const char* options_json,
                        char** report_json) {
    return guard([&] {
        if (!a || !b || !report_json) throw iwd::ValidationError("null argument");
        const json j = parse_options(options_json);
        const auto grid = grid_from(j);
        iwd::transport::IwdOptions opts;
        const std::string solver = j.value("solver", "exact");
        if (solver == "exact") {
            opts.solver = iwd::transport::SolverKind::exact;
        } else if (solver == "sinkhorn") {
            opts.solver = iwd::transport::SolverKind::sinkhorn;
            opts.sinkhorn.epsilon = j.value("epsilon", 0.0);
            opts.sinkhorn.max_iterations = j.value("max_iterations", 10000);
            opts.sinkhorn.tolerance = j.value("tolerance", 1e-6);
            opts.sinkhorn.log_domain = j.value("log_domain", true);
        } else if (solver == "dual") {
            opts.solver = iwd::transport::SolverKind::dual;
            opts.dual.lambda = j.value("lambda", 10.0);
            opts.dual.steps = j.value("steps", 500);
            opts.dual.seed = j.value("seed", std::uint64_t{0});
        } else {
            throw iwd::ValidationError("unknown solver '" + solver + "'");
        }
        const auto v = iwd::transport::iwd(a->img, b->img, grid, opts);
        *report_json = dup_string(iwd::transport::to_json(v));
    });
}

iwd_status iwd_dataset_open(const char* spec, iwd_dataset** out) {
    return guard([&] {
        if (!spec || !out) throw iwd::ValidationError("null argument");
        const std::string s = spec;
        auto handle = std::make_unique<iwd_dataset>();
        if (s.rfind("synth:", 0) == 0) {
            iwd::harness::SyntheticParams p;
            std::uint64_t seed = 0;
            std::istringstream fields(s.substr(6));
            std::string field;
            while (std::getline(fields, field, ',')) {
                if (field.empty()) continue;
                const auto eq = field.find('=');
                if (eq == std::string::npos)
                    throw iwd::ValidationError("dataset spec: expected key=value, got '" + field +
                                               "'");
                const std::string key = field.substr(0, eq);
                const std::string val = field.substr(eq + 1);
                try {
                    if (key == "classes") p.classes = std::stoi(val);
                    else if (key == "per_class") p.per_class = std::stoi(val);
                    else if (key == "height") p.height = std::stoi(val);
                    else if (key == "width") p.width = std::stoi(val);
                    else if (key == "sigma") p.sigma = std::stod(val);
                    else if (key == "contrast") p.contrast = std::stod(val);
                    else if (key == "seed") seed = std::stoull(val);
                    else throw iwd::ValidationError("dataset spec: unknown key '" + key + "'");
                } catch (const std::invalid_argument&) {
                    throw iwd::ValidationError("dataset spec: bad value for '" + key + "'");
                } catch (const std::out_of_range&) {
                    throw iwd::ValidationError("dataset spec: bad value for '" + key + "'");
                }
            }
            handle->ds = iwd::harness::generate_synthetic(seed, p);
        } else if (s.rfind("idx:", 0) == 0) {
            const std::string rest = s.substr(4);
            const auto comma = rest.find(',');
            if (comma == std::string::npos)
                throw iwd::ValidationError("dataset spec: idx needs 'idx:IMAGES,LABELS'");
            handle->ds = iwd::harness::load_idx(rest.substr(0, comma), rest.substr(comma + 1));
        } else {
            throw iwd::ValidationError("dataset spec must start with 'synth:' or 'idx:'");
        }
        *out = handle.release();
    });
}

iwd_status iwd_dataset_info(const iwd_dataset* ds, size_t* count, int* classes) {
    return guard([&] {
        if (!ds) throw iwd::ValidationError("null argument");
        if (count) *count = ds->ds.size();
        if (classes) *classes = ds->ds.class_count;
    });
}

iwd_status iwd_dataset_save_idx(const iwd_dataset* ds, const char* images_path,
                                const char* labels_path) {
    return guard([&] {
        if (!ds || !images_path || !labels_path) throw iwd::ValidationError("null argument");
        iwd::harness::save_idx(ds->ds, images_path, labels_path);
    });
}

void iwd_dataset_free(iwd_dataset* ds) { delete ds; }

iwd_status iwd_model_load(const char* path, iwd_model** out) {
    return guard([&] {
        if (!path || !out) throw iwd::ValidationError("null argument");
        auto handle = std::make_unique<iwd_model>();
        handle->m = iwd::harness::load_model(path);
        *out = handle.release();
    });
}

iwd_status iwd_model_save(const iwd_model* m, const char* path) {
    return guard([&] {
        if (!m || !path) throw iwd::ValidationError("null argument");
        iwd::harness::save_model(m->m, path);
    });
}

iwd_status iwd_model_predict(const iwd_model* m, const iwd_image* img, int* label) {
    return guard([&] {
        if (!m || !img || !label) throw iwd::ValidationError("null argument");
        *label = m->m.classifier.predict(img->img);
    });
}

void iwd_model_free(iwd_model* m) { delete m; }

iwd_status iwd_defend_run(const iwd_dataset* ds, const char* options_json, iwd_model** out_model,
                          char** report_json) {
    return guard([&] {
        if (!ds || !out_model) throw iwd::ValidationError("null argument");
        const json j = parse_options(options_json);
        const std::string method = j.value("method", "iwdd");
        const std::uint64_t seed = j.value("seed", std::uint64_t{0});
        const int epochs = j.value("epochs", 200);
        const int batch = j.value("batch", 128);
        const double lr = j.value("lr", 0.1);
        const auto& data = ds->ds;
        data.validate();
        iwd::diffcore::NetworkSpec spec;
        spec.layer_widths = {static_cast<int>(data.images[0].pixels.size()), 256, 128,
                             data.class_count};
        spec.activation = iwd::diffcore::Activation::relu;
        spec.output = iwd::diffcore::OutputKind::logits;

        iwd::defense::TrainedModel model;
        if (method == "natural") {
            model = iwd::defense::natural_train(data.images, data.labels, spec,
                                                {iwd::diffcore::OptimizerKind::sgd, lr}, epochs,
                                                batch, seed);
        } else if (method == "iwdd") {
            iwd::defense::DefenseConfig cfg;
            cfg.beta = j.value("beta", cfg.beta);
            cfg.epochs = epochs;
            cfg.batch = batch;
            cfg.optimizer.learning_rate = lr;
            cfg.seed = seed;
            cfg.inner.tau = j.value("tau", cfg.inner.tau);
            cfg.inner.eps_w = resolve_budget(j, data, cfg.inner.grid, seed);
            if (j.contains("n_critic")) cfg.inner.n_critic = j["n_critic"].get<int>();
            if (j.contains("inner_lr"))
                cfg.inner.optimizer.learning_rate = j["inner_lr"].get<double>();
            model = iwd::defense::iwdd_train(data.images, data.labels, spec, cfg);
        } else {
            throw iwd::ValidationError("unknown training method '" + method + "'");
        }

        json rep{{"method", method},
                 {"train_accuracy", model.train_accuracy},
                 {"epochs_completed", model.epochs_completed},
                 {"skipped_batches", model.skipped_batches},
                 {"config_hash", iwd::digest::hex64(model.config_hash)}};
        if (report_json) *report_json = dup_string(rep.dump(2));
        auto handle = std::make_unique<iwd_model>();
        handle->m = std::move(model);
        *out_model = handle.release();
    });
}

iwd_status iwd_attack_run(const iwd_model* m, const iwd_dataset* ds, const char* options_json,
                          char** report_json) {
    return guard([&] {
        if (!m || !ds || !report_json) throw iwd::ValidationError("null argument");
        const json j = parse_options(options_json);
        const auto& h = m->m.classifier;
        h.validate();
        const auto& data = ds->ds;
        data.validate();

        const std::string attacker = j.value("attacker", "iwda");
        const std::uint64_t seed = j.value("seed", std::uint64_t{0});
        const int limit = j.value("limit", static_cast<int>(data.size()));
        if (limit < 1) throw iwd::ValidationError("limit must be >= 1");
        const Subset sub = take_subset(data, limit);

        iwd::attack::AttackConfig cfg;
        cfg.grid = grid_from(j);
        cfg.tau = j.value("tau", cfg.tau);
        cfg.lambda = j.value("lambda", cfg.lambda);
        cfg.n_critic = j.value("n_critic", cfg.n_critic);
        cfg.max_iterations = j.value("iterations", cfg.max_iterations);
        cfg.init_noise = j.value("init_noise", cfg.init_noise);
        if (j.contains("lr")) cfg.optimizer.learning_rate = j["lr"].get<double>();
        const std::string mode = j.value("mode", "untargeted");
        if (mode == "targeted") {
            cfg.mode = iwd::attack::AttackMode::targeted;
            cfg.target = j.value("target", -1);
        } else if (mode != "untargeted") {
            throw iwd::ValidationError("mode must be 'untargeted' or 'targeted'");
        }
        double budget = std::numeric_limits<double>::infinity();
        const bool transport_attack = attacker == "iwda" || attacker == "iwda_primal";
        if (transport_attack) budget = resolve_budget(j, data, cfg.grid, seed);
        cfg.eps_w = budget;
        cfg.variant = attacker == "iwda_primal" ? iwd::attack::AttackVariant::primal
                                                : iwd::attack::AttackVariant::dual;

        const double eps = j.value("eps", 0.05);
        const double alpha = j.value("alpha", 0.02);
        const int k = j.value("k", 10);

        json per_image = json::array();
        int eligible = 0, successes = 0, clean_correct = 0;
        for (std::size_t i = 0; i < sub.images.size(); ++i) {
            const auto& x = sub.images[i];
            const int y = sub.labels[i];
            const int clean_pred = h.predict(x);
            if (clean_pred == y) ++clean_correct;
            json rec{{"index", sub.indices[i]}, {"label", y}, {"clean_prediction", clean_pred}};
            if (clean_pred != y) {
                rec["eligible"] = false;
                per_image.push_back(std::move(rec));
                continue;
            }
            ++eligible;
            rec["eligible"] = true;

            iwd::attack::AttackResult res;
            if (transport_attack) {
                iwd::attack::AttackConfig ci = cfg;
                ci.seed = iwd::rng::mix(seed, static_cast<std::uint64_t>(sub.indices[i]));
                res = cfg.variant == iwd::attack::AttackVariant::primal
                          ? iwd::attack::iwda_primal_attack(x, y, h, ci)
                          : iwd::attack::iwda_attack(x, y, h, ci);
            } else {
                if (attacker == "fgsm") res.adversarial = iwd::attack::fgsm(x, y, h, eps);
                else if (attacker == "pgd")
                    res.adversarial = iwd::attack::pgd(x, y, h, eps, alpha, k);
                else
                    throw iwd::ValidationError("unknown attacker '" + attacker + "'");
                res.predicted = h.predict(res.adversarial);
                res.success = cfg.mode == iwd::attack::AttackMode::targeted
                                  ? res.predicted == cfg.target
                                  : res.predicted != y;
                res.l2 = iwd::attack::l2_distance(x, res.adversarial);
                res.linf = iwd::attack::linf_distance(x, res.adversarial);
                res.iwd_exact =
                    iwd::transport::iwd(x, res.adversarial, cfg.grid).value;
                res.budget_satisfied = true;
                res.iterations = attacker == "fgsm" ? 1 : k;
            }
            if (res.success) ++successes;
            rec["prediction"] = res.predicted;
            rec["success"] = res.success;
            rec["budget_satisfied"] = res.budget_satisfied;
            rec["iwd_exact"] = res.iwd_exact;
            rec["l2"] = res.l2;
            rec["linf"] = res.linf;
            rec["iterations"] = res.iterations;
            per_image.push_back(std::move(rec));
        }

        json rep{{"attacker", attacker},
                 {"samples", sub.images.size()},
                 {"clean_accuracy",
                  sub.images.empty() ? 0.0
                                     : static_cast<double>(clean_correct) /
                                           static_cast<double>(sub.images.size())},
                 {"asr", eligible == 0 ? 0.0
                                       : static_cast<double>(successes) /
                                             static_cast<double>(eligible)},
                 {"per_image", per_image}};
        if (transport_attack) rep["budget_eps_w"] = budget;
        *report_json = dup_string(rep.dump(2));
    });
}

iwd_status iwd_eval_run(const iwd_model* m, const iwd_dataset* ds, const char* options_json,
                        char** report_json) {
    return guard([&] {
        if (!m || !ds || !report_json) throw iwd::ValidationError("null argument");
        const json j = parse_options(options_json);
        const auto& h = m->m.classifier;
        h.validate();
        const auto& data = ds->ds;
        data.validate();

        std::vector<std::string> names = {"clean", "fgsm", "pgd10", "iwda"};
        if (j.contains("attacks")) names = j["attacks"].get<std::vector<std::string>>();
        const double beta = j.value("beta", 0.1);
        const std::uint64_t seed = j.value("seed", std::uint64_t{0});
        const int limit = j.value("limit", static_cast<int>(data.size()));
        const double tau = j.value("tau", 0.1);
        const Subset sub = take_subset(data, limit);

        const iwd::patchdist::PatchGrid grid{};
        std::vector<iwd::defense::NamedAttacker> attackers;
        auto iwda_counter = std::make_shared<std::uint64_t>(0);
        for (const auto& name : names) {
            if (name == "clean") {
                attackers.push_back({"clean", [](const iwd::patchdist::Image& x, int) {
                                         return x;
                                     }});
            } else if (name == "fgsm") {
                attackers.push_back({"fgsm", [&h](const iwd::patchdist::Image& x, int y) {
                                         return iwd::attack::fgsm(x, y, h, 0.05);
                                     }});
            } else if (name == "pgd10") {
                attackers.push_back({"pgd10", [&h](const iwd::patchdist::Image& x, int y) {
                                         return iwd::attack::pgd(x, y, h, 0.1, 0.02, 10);
                                     }});
            } else if (name == "iwda") {
                iwd::attack::AttackConfig cfg;
                cfg.tau = tau;
                cfg.eps_w = resolve_budget(j, data, cfg.grid, seed);
                cfg.max_iterations = j.value("iterations", 150);
                cfg.optimizer.learning_rate = j.value("lr", 5e-3);
                cfg.seed = seed;
                attackers.push_back(
                    {"iwda", [&h, cfg, iwda_counter](const iwd::patchdist::Image& x, int y) {
                         iwd::attack::AttackConfig ci = cfg;
                         ci.seed = iwd::rng::mix(cfg.seed, (*iwda_counter)++);
                         return iwd::attack::iwda_attack(x, y, h, ci).adversarial;
                     }});
            } else {
                throw iwd::ValidationError("unknown attack '" + name + "'");
            }
        }

        const auto rep =
            iwd::defense::evaluate_defense(h, attackers, sub.images, sub.labels, beta);

        std::ostringstream csv;
        csv << "metric,accuracy_percent\n";
        csv << "clean," << iwd::harness::format_percent(rep.clean_accuracy) << "\n";
        json jacc = json::object();
        for (const auto& [name, acc] : rep.adversarial_accuracy) {
            if (name != "clean")
                csv << name << ',' << iwd::harness::format_percent(acc) << "\n";
            jacc[name] = acc;
        }
        json out{{"clean_accuracy", rep.clean_accuracy},
                 {"adversarial_accuracy", jacc},
                 {"empirical_risk", rep.empirical_risk},
                 {"beta", rep.beta},
                 {"samples", sub.images.size()},
                 {"csv", csv.str()}};
        *report_json = dup_string(out.dump(2));
    });
}

iwd_status iwd_experiment_run(const char* config_json, char** outputs_json) {
    return guard([&] {
        if (!config_json) throw iwd::ValidationError("null argument");
        const auto cfg = iwd::harness::config_from_json(config_json);
        const auto outputs = iwd::harness::run_experiment(cfg);
        if (outputs_json) *outputs_json = dup_string(json{{"outputs", outputs}}.dump(2));
    });
}

} // extern "C"
