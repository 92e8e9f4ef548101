// Command-line front end. Talks to the library exclusively through the C API.
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "iwd/iwd_c.h"

using nlohmann::json;

namespace {

int fail(iwd_status st) {
    std::cerr << "error: " << iwd_last_error() << "\n";
    return static_cast<int>(st);
}

int write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
    out.close();
    if (!out) {
        std::cerr << "error: cannot write " << path << "\n";
        return 4;
    }
    return 0;
}

std::string grab(char* s) {
    std::string out = s ? s : "";
    iwd_string_free(s);
    return out;
}

// --data synth:...  |  --data idx:images,labels  |  --data images.idx --labels labels.idx
std::string dataset_spec(const std::string& data, const std::string& labels) {
    if (data.rfind("synth:", 0) == 0 || data.rfind("idx:", 0) == 0) return data;
    if (labels.empty())
        throw CLI::ValidationError("--data", "plain IDX path needs --labels (or use idx:IMAGES,LABELS)");
    return "idx:" + data + "," + labels;
}

struct Handle {
    iwd_image* img = nullptr;
    iwd_dataset* ds = nullptr;
    iwd_model* model = nullptr;
    ~Handle() {
        iwd_image_free(img);
        iwd_dataset_free(ds);
        iwd_model_free(model);
    }
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"patch-transport distances, attacks, and adversarial training"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    int threads = 1;
    std::string out_dir;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--seed", seed, "master seed");
        sub->add_option("--threads", threads, "worker threads (results do not depend on it)");
        sub->add_option("--out-dir", out_dir, "output directory");
    };

    // distance
    auto* dist = app.add_subcommand("distance", "patch-transport distance between two images");
    std::string dist_a, dist_b, dist_solver = "exact", dist_out;
    int dist_kernel = 3, dist_stride = 0, dist_iters = 10000, dist_steps = 500;
    double dist_eps = 0.0, dist_tol = 1e-6, dist_lambda = 10.0;
    dist->add_option("--a", dist_a, "first image (PGM/PPM)")->required();
    dist->add_option("--b", dist_b, "second image (PGM/PPM)")->required();
    dist->add_option("--solver", dist_solver, "exact | sinkhorn | dual")
        ->check(CLI::IsMember({"exact", "sinkhorn", "dual"}));
    dist->add_option("--kernel", dist_kernel, "patch size");
    dist->add_option("--stride", dist_stride, "patch stride (default: kernel)");
    dist->add_option("--epsilon", dist_eps, "sinkhorn regularizer (<=0: 0.05*max cost)");
    dist->add_option("--iterations", dist_iters, "sinkhorn iteration cap");
    dist->add_option("--tolerance", dist_tol, "sinkhorn marginal tolerance");
    dist->add_option("--lambda", dist_lambda, "dual gradient-penalty weight");
    dist->add_option("--steps", dist_steps, "dual critic steps");
    dist->add_option("--out", dist_out, "also write the JSON report here");
    add_common(dist);

    // attack
    auto* atk = app.add_subcommand("attack", "run an attack over a dataset");
    std::string atk_model, atk_data, atk_labels, atk_out = "report.json";
    std::string atk_variant = "dual", atk_attacker, atk_mode = "untargeted";
    int atk_target = -1, atk_ncritic = 5, atk_iters = 100, atk_limit = 0, atk_k = 10;
    double atk_tau = 0.1, atk_lambda = 10.0, atk_epsw = 0.0, atk_eps = 0.05, atk_alpha = 0.02;
    double atk_lr = 5e-4, atk_noise = 0.01;
    atk->add_option("--model", atk_model, "classifier parameter blob")->required();
    atk->add_option("--data", atk_data, "dataset spec (synth:... or idx:...)")->required();
    atk->add_option("--labels", atk_labels, "IDX labels when --data is a plain path");
    atk->add_option("--variant", atk_variant, "dual | primal")
        ->check(CLI::IsMember({"dual", "primal"}));
    atk->add_option("--attacker", atk_attacker, "override: iwda | iwda_primal | fgsm | pgd");
    atk->add_option("--mode", atk_mode, "untargeted | targeted")
        ->check(CLI::IsMember({"untargeted", "targeted"}));
    atk->add_option("--target", atk_target, "target class (targeted mode)");
    atk->add_option("--tau", atk_tau, "classification-loss weight");
    atk->add_option("--lambda", atk_lambda, "critic gradient-penalty weight");
    atk->add_option("--n-critic", atk_ncritic, "critic steps per outer iteration");
    atk->add_option("--iterations", atk_iters, "outer iteration cap");
    atk->add_option("--eps-w", atk_epsw, "transport budget (<=0: derive from data)");
    atk->add_option("--init-noise", atk_noise, "perturbation init scale");
    atk->add_option("--lr", atk_lr, "perturbation learning rate");
    atk->add_option("--limit", atk_limit, "attack at most this many samples");
    atk->add_option("--eps", atk_eps, "fgsm/pgd budget");
    atk->add_option("--alpha", atk_alpha, "pgd step");
    atk->add_option("--k", atk_k, "pgd iterations");
    atk->add_option("--out", atk_out, "JSON report path");
    add_common(atk);

    // defend
    auto* dfd = app.add_subcommand("defend", "train a classifier");
    std::string dfd_data, dfd_labels, dfd_out = "model.bin", dfd_report, dfd_method = "iwdd";
    int dfd_epochs = 200, dfd_batch = 128, dfd_ncritic = 5;
    double dfd_beta = 0.1, dfd_tau = 0.1, dfd_lr = 0.1, dfd_epsw = 0.0, dfd_inner_lr = 0.0;
    dfd->add_option("--data", dfd_data, "dataset spec")->required();
    dfd->add_option("--labels", dfd_labels, "IDX labels when --data is a plain path");
    dfd->add_option("--method", dfd_method, "iwdd | natural")
        ->check(CLI::IsMember({"iwdd", "natural"}));
    dfd->add_option("--beta", dfd_beta, "clean-loss weight");
    dfd->add_option("--tau", dfd_tau, "inner-attack classification weight");
    dfd->add_option("--epochs", dfd_epochs, "training epochs");
    dfd->add_option("--batch", dfd_batch, "batch size");
    dfd->add_option("--lr", dfd_lr, "classifier learning rate");
    dfd->add_option("--eps-w", dfd_epsw, "inner transport budget (<=0: derive from data)");
    dfd->add_option("--n-critic", dfd_ncritic, "inner critic steps");
    dfd->add_option("--inner-lr", dfd_inner_lr, "inner perturbation learning rate (0: default)");
    dfd->add_option("--out", dfd_out, "model output path");
    dfd->add_option("--report", dfd_report, "optional JSON training report");
    add_common(dfd);

    // eval
    auto* evl = app.add_subcommand("eval", "accuracy table under a set of attacks");
    std::string evl_model, evl_data, evl_labels, evl_out = "table.csv", evl_report;
    std::vector<std::string> evl_attacks = {"clean", "fgsm", "pgd10", "iwda"};
    int evl_limit = 0;
    double evl_beta = 0.1, evl_tau = 0.1, evl_epsw = 0.0;
    evl->add_option("--model", evl_model, "classifier parameter blob")->required();
    evl->add_option("--data", evl_data, "dataset spec")->required();
    evl->add_option("--labels", evl_labels, "IDX labels when --data is a plain path");
    evl->add_option("--attacks", evl_attacks, "subset of clean,fgsm,pgd10,iwda")
        ->delimiter(',');
    evl->add_option("--limit", evl_limit, "evaluate at most this many samples");
    evl->add_option("--beta", evl_beta, "risk clean-loss weight");
    evl->add_option("--tau", evl_tau, "iwda classification weight");
    evl->add_option("--eps-w", evl_epsw, "iwda budget (<=0: derive from data)");
    evl->add_option("--out", evl_out, "CSV output path");
    evl->add_option("--report", evl_report, "optional JSON report path");
    add_common(evl);

    // experiment
    auto* exp = app.add_subcommand("experiment", "run a named experiment");
    std::string exp_config, exp_kind;
    exp->add_option("--config", exp_config, "experiment config JSON file");
    exp->add_option("--kind", exp_kind,
                    "attack_table | defense_table | perturbation_histogram | ablation_tau | "
                    "ablation_beta | theorem1_demo");
    add_common(exp);

    // ablate
    auto* abl = app.add_subcommand("ablate", "parameter sweep (tau or beta)");
    std::string abl_param = "tau";
    std::vector<double> abl_values;
    int abl_seeds = 3, abl_images = 0;
    abl->add_option("--param", abl_param, "tau | beta")->check(CLI::IsMember({"tau", "beta"}));
    abl->add_option("--values", abl_values, "sweep values")->delimiter(',');
    abl->add_option("--seeds", abl_seeds, "seeds per value");
    abl->add_option("--images", abl_images, "evaluation subset size");
    add_common(abl);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    Handle h;
    iwd_status st = IWD_OK;
    char* text = nullptr;

    if (dist->parsed()) {
        if ((st = iwd_image_load(dist_a.c_str(), &h.img)) != IWD_OK) return fail(st);
        iwd_image* b = nullptr;
        if ((st = iwd_image_load(dist_b.c_str(), &b)) != IWD_OK) return fail(st);
        json opts{{"solver", dist_solver},
                  {"kernel", dist_kernel},
                  {"stride", dist_stride > 0 ? dist_stride : dist_kernel},
                  {"epsilon", dist_eps},
                  {"max_iterations", dist_iters},
                  {"tolerance", dist_tol},
                  {"lambda", dist_lambda},
                  {"steps", dist_steps},
                  {"seed", seed}};
        st = iwd_distance(h.img, b, opts.dump().c_str(), &text);
        iwd_image_free(b);
        if (st != IWD_OK) return fail(st);
        const std::string report = grab(text);
        std::cout << report << "\n";
        if (!dist_out.empty())
            if (int rc = write_file(dist_out, report + "\n")) return rc;
        return 0;
    }

    if (atk->parsed()) {
        if ((st = iwd_model_load(atk_model.c_str(), &h.model)) != IWD_OK) return fail(st);
        if ((st = iwd_dataset_open(dataset_spec(atk_data, atk_labels).c_str(), &h.ds)) != IWD_OK)
            return fail(st);
        const std::string attacker =
            !atk_attacker.empty() ? atk_attacker
                                  : (atk_variant == "primal" ? "iwda_primal" : "iwda");
        json opts{{"attacker", attacker}, {"mode", atk_mode},      {"target", atk_target},
                  {"tau", atk_tau},       {"lambda", atk_lambda},  {"n_critic", atk_ncritic},
                  {"iterations", atk_iters}, {"eps_w", atk_epsw},  {"init_noise", atk_noise},
                  {"lr", atk_lr},         {"eps", atk_eps},        {"alpha", atk_alpha},
                  {"k", atk_k},           {"seed", seed}};
        if (atk_limit > 0) opts["limit"] = atk_limit;
        if ((st = iwd_attack_run(h.model, h.ds, opts.dump().c_str(), &text)) != IWD_OK)
            return fail(st);
        const std::string report = grab(text);
        if (int rc = write_file(atk_out, report + "\n")) return rc;
        const json rep = json::parse(report);
        std::cout << "attacker " << attacker << ": asr " << rep["asr"].get<double>()
                  << " over " << rep["samples"].get<std::size_t>() << " samples -> " << atk_out
                  << "\n";
        return 0;
    }

    if (dfd->parsed()) {
        if ((st = iwd_dataset_open(dataset_spec(dfd_data, dfd_labels).c_str(), &h.ds)) != IWD_OK)
            return fail(st);
        json opts{{"method", dfd_method}, {"beta", dfd_beta},   {"tau", dfd_tau},
                  {"epochs", dfd_epochs}, {"batch", dfd_batch}, {"lr", dfd_lr},
                  {"eps_w", dfd_epsw},    {"n_critic", dfd_ncritic}, {"seed", seed}};
        if (dfd_inner_lr > 0.0) opts["inner_lr"] = dfd_inner_lr;
        if ((st = iwd_defend_run(h.ds, opts.dump().c_str(), &h.model, &text)) != IWD_OK)
            return fail(st);
        const std::string report = grab(text);
        if ((st = iwd_model_save(h.model, dfd_out.c_str())) != IWD_OK) return fail(st);
        std::cout << report << "\n";
        if (!dfd_report.empty())
            if (int rc = write_file(dfd_report, report + "\n")) return rc;
        return 0;
    }

    if (evl->parsed()) {
        if ((st = iwd_model_load(evl_model.c_str(), &h.model)) != IWD_OK) return fail(st);
        if ((st = iwd_dataset_open(dataset_spec(evl_data, evl_labels).c_str(), &h.ds)) != IWD_OK)
            return fail(st);
        json opts{{"attacks", evl_attacks},
                  {"beta", evl_beta},
                  {"tau", evl_tau},
                  {"eps_w", evl_epsw},
                  {"seed", seed}};
        if (evl_limit > 0) opts["limit"] = evl_limit;
        if ((st = iwd_eval_run(h.model, h.ds, opts.dump().c_str(), &text)) != IWD_OK)
            return fail(st);
        const json rep = json::parse(grab(text));
        if (int rc = write_file(evl_out, rep["csv"].get<std::string>())) return rc;
        if (!evl_report.empty()) {
            json trimmed = rep;
            trimmed.erase("csv");
            if (int rc = write_file(evl_report, trimmed.dump(2) + "\n")) return rc;
        }
        std::cout << rep["csv"].get<std::string>();
        return 0;
    }

    if (exp->parsed() || abl->parsed()) {
        json cfg;
        if (exp->parsed() && !exp_config.empty()) {
            std::ifstream in(exp_config);
            if (!in) {
                std::cerr << "error: cannot open " << exp_config << "\n";
                return 4;
            }
            std::ostringstream buf;
            buf << in.rdbuf();
            try {
                cfg = json::parse(buf.str());
            } catch (const json::exception& e) {
                std::cerr << "error: " << exp_config << ": " << e.what() << "\n";
                return 2;
            }
        } else if (exp->parsed()) {
            if (exp_kind.empty()) {
                std::cerr << "error: experiment needs --config or --kind\n";
                return 2;
            }
            cfg["experiment"] = exp_kind;
        } else {
            cfg["experiment"] = abl_param == "beta" ? "ablation_beta" : "ablation_tau";
            if (!abl_values.empty()) cfg["sweep"] = abl_values;
            else cfg["sweep"] = abl_param == "beta" ? json{0.05, 0.1, 0.5}
                                                    : json{0.01, 0.05, 0.1};
            cfg["seeds"] = abl_seeds;
            if (abl_images > 0) cfg["attack_images"] = abl_images;
        }
        CLI::App* active = exp->parsed() ? exp : abl;
        if (active->count("--seed")) cfg["seed"] = seed;
        if (active->count("--threads")) cfg["threads"] = threads;
        if (active->count("--out-dir")) cfg["out_dir"] = out_dir;
        if ((st = iwd_experiment_run(cfg.dump().c_str(), &text)) != IWD_OK) return fail(st);
        const json rep = json::parse(grab(text));
        for (const auto& p : rep["outputs"]) std::cout << p.get<std::string>() << "\n";
        return 0;
    }

    return 2;
}
