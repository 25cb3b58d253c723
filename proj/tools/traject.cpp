#include <cstdio>
#include <exception>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <traject/pipeline.hpp>
#include <traject/synth.hpp>

// Command-line driver. Exit codes: 0 success, 1 analysis failure, 2 input or
// usage error. All numeric results land in JSON reports and CSV sidecars;
// stdout carries a short human summary only.

namespace {

using traject::pipeline::RunConfig;

void parse_root_policy(const std::string& s, RunConfig& cfg) {
    if (s == "medoid") {
        cfg.root_policy = traject::pipeline::RootPolicy::medoid;
        return;
    }
    const std::string prefix = "index:";
    if (s.rfind(prefix, 0) == 0) {
        const std::string digits = s.substr(prefix.size());
        try {
            std::size_t used = 0;
            cfg.root_index = std::stoull(digits, &used);
            if (used != digits.size() || digits.empty()) {
                throw std::invalid_argument(digits);
            }
        } catch (const std::exception&) {
            throw traject::InputError("--root index:'" + digits + "' is not a row number");
        }
        cfg.root_policy = traject::pipeline::RootPolicy::fixed_index;
        return;
    }
    throw traject::InputError("--root must be 'medoid' or 'index:<row>'");
}

std::vector<traject::pipeline::LayerSpec> parse_layers(const std::vector<std::string>& raw) {
    std::vector<traject::pipeline::LayerSpec> layers;
    for (const std::string& item : raw) {
        const std::size_t colon = item.find(':');
        if (colon == std::string::npos || colon == 0 || colon + 1 == item.size()) {
            throw traject::InputError("--layer expects depth:path, got '" + item + "'");
        }
        traject::pipeline::LayerSpec layer;
        const std::string depth = item.substr(0, colon);
        try {
            std::size_t used = 0;
            layer.depth = std::stod(depth, &used);
            if (used != depth.size()) {
                throw std::invalid_argument(depth);
            }
        } catch (const std::exception&) {
            throw traject::InputError("--layer depth '" + depth + "' is not a number");
        }
        layer.embeddings_path = item.substr(colon + 1);
        layers.push_back(std::move(layer));
    }
    return layers;
}

std::string format2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

void print_fidelity_summary(const traject::pipeline::FidelityReport& rep) {
    std::string line = "tau: " + format2(rep.tau);
    if (rep.bootstrap.present) {
        line += ", ci: [" + format2(rep.bootstrap.ci_low) + ", " + format2(rep.bootstrap.ci_high) +
                "]";
    }
    std::cout << line << '\n';
    if (rep.null_summary.present) {
        std::cout << "null: mean " << format2(rep.null_summary.mean) << ", band ["
                  << format2(rep.null_summary.p2_5) << ", " << format2(rep.null_summary.p97_5)
                  << "]\n";
    }
    if (rep.permutation.present) {
        std::cout << "permutation: true ordering rank " << rep.permutation.true_rank << " of "
                  << rep.permutation.n_orderings << '\n';
    }
    for (const std::string& w : rep.warnings) {
        std::cerr << "warning: " << w << '\n';
    }
}

void print_table(const traject::probe::MetricTable& t) {
    const auto print_block = [&](const char* name, const traject::Matrix& m) {
        bool any = false;
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            if (std::isfinite(m(i / m.cols(), i % m.cols()))) {
                any = true;
                break;
            }
        }
        if (!any) {
            return;
        }
        std::cout << name << ":\n";
        std::cout << "  model";
        for (const std::string& c : t.cohorts) {
            std::cout << '\t' << c;
        }
        std::cout << '\n';
        for (std::size_t i = 0; i < t.models.size(); ++i) {
            std::cout << "  " << t.models[i];
            for (std::size_t c = 0; c < t.cohorts.size(); ++c) {
                const double v = m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
                std::cout << '\t' << (std::isfinite(v) ? format2(v) : std::string("-"));
            }
            std::cout << '\n';
        }
    };
    print_block("tau", t.tau);
    print_block("f1", t.f1);
}

void add_input_options(CLI::App* sub, RunConfig& cfg) {
    sub->add_option("--embeddings", cfg.embeddings_path, "EMB1 embedding file")->required();
    sub->add_option("--manifest", cfg.manifest_path, "Patch manifest CSV")->required();
    sub->add_option("--spec", cfg.spec_path, "Progression spec JSON")->required();
}

void add_graph_options(CLI::App* sub, RunConfig& cfg, std::string& root_spec) {
    sub->add_option("--k", cfg.k, "Neighborhood size")->capture_default_str();
    sub->add_option("--n-dcs", cfg.n_dcs, "Number of diffusion components")->capture_default_str();
    sub->add_option("--alpha", cfg.alpha, "Density normalization exponent (0 or 1)")
        ->capture_default_str();
    sub->add_flag(
        "--no-symmetrize", [&cfg](std::int64_t) { cfg.symmetrize = false; },
        "Decompose the raw directed transition matrix instead of the symmetrized kernel");
    static const std::map<std::string, traject::diffusion::DptWeights> wmap{
        {"paper", traject::diffusion::DptWeights::paper},
        {"classic", traject::diffusion::DptWeights::classic}};
    sub->add_option("--dpt-weights", cfg.weights, "Accumulation weights: paper or classic")
        ->transform(CLI::CheckedTransformer(wmap, CLI::ignore_case));
    sub->add_option("--root", root_spec, "Root choice: medoid or index:<sampled row>")
        ->capture_default_str();
    sub->add_option("--dense-cutoff", cfg.dense_cutoff,
                    "Use the dense eigensolver at or below this point count")
        ->capture_default_str();
    sub->add_flag("--force-dense", cfg.force_dense, "Always use the dense eigensolver");
    sub->add_option("--trust-k", cfg.trust_k, "Trustworthiness neighborhood size")
        ->capture_default_str();
    sub->add_option("--id-subsample", cfg.id_subsample,
                    "Point cap for the intrinsic dimension estimate")
        ->capture_default_str();
}

void add_sample_options(CLI::App* sub, RunConfig& cfg) {
    sub->add_option("--per-class", cfg.per_class_n, "Target sample size per class")
        ->capture_default_str();
    sub->add_option("--per-slide-cap", cfg.per_slide_cap, "Max patches drawn from one slide")
        ->capture_default_str();
    sub->add_option("--seed", cfg.seed, "Seed for all randomized steps")->capture_default_str();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Pseudotime-based progression analysis of patch embedding spaces"};
    app.require_subcommand(1);
    app.fallthrough(); // subcommands inherit this, so --threads may trail them

    int thread_cap = 0;
    app.add_option("--threads", thread_cap,
                   "Cap worker threads (default: TRAJECT_THREADS or all cores)");

    RunConfig cfg;
    std::string root_spec = "medoid";
    std::function<void()> runner;

    // fidelity, with bootstrap/null/permtest as preset variants
    const auto add_fidelity_like = [&](const char* name, const char* desc, bool boot, bool null_on,
                                       bool perm) {
        CLI::App* sub = app.add_subcommand(name, desc);
        add_input_options(sub, cfg);
        add_graph_options(sub, cfg, root_spec);
        add_sample_options(sub, cfg);
        sub->add_option("--out", cfg.out_path, "Report JSON path (sidecars share its stem)")
            ->required();
        sub->add_option("--model-name", cfg.model_name, "Model label used in joined tables")
            ->capture_default_str();
        sub->add_option("--dump-transition", cfg.dump_transition_path,
                        "Also write the transition matrix as row,col,value CSV");
        if (!boot) {
            sub->add_flag("--bootstrap", cfg.with_bootstrap, "Add a stratified bootstrap CI");
        }
        if (!null_on) {
            sub->add_flag("--null", cfg.with_null, "Add a label-shuffle null summary");
        }
        if (!perm) {
            sub->add_flag("--permtest", cfg.with_permutation,
                          "Add the exhaustive class-ordering permutation test");
        }
        sub->add_option("--bootstrap-iters", cfg.bootstrap_iters, "Bootstrap iterations")
            ->capture_default_str();
        sub->add_option("--null-reps", cfg.null_reps, "Label-shuffle replicates")
            ->capture_default_str();
        sub->callback([&, boot, null_on, perm] {
            runner = [&, boot, null_on, perm] {
                cfg.with_bootstrap = cfg.with_bootstrap || boot;
                cfg.with_null = cfg.with_null || null_on;
                cfg.with_permutation = cfg.with_permutation || perm;
                parse_root_policy(root_spec, cfg);
                const auto rep = traject::pipeline::run_fidelity(cfg);
                print_fidelity_summary(rep);
                std::cout << "report: " << cfg.out_path << '\n';
            };
        });
        return sub;
    };
    add_fidelity_like("fidelity",
                      "Sample, build the diffusion pseudotime, and score trajectory fidelity",
                      false, false, false);
    add_fidelity_like("bootstrap", "Fidelity run with a stratified bootstrap confidence interval",
                      true, false, false);
    add_fidelity_like("null", "Fidelity run with a label-shuffle null summary", false, true,
                      false);
    add_fidelity_like("permtest", "Fidelity run with the exhaustive class-ordering test", false,
                      false, true);

    // id
    {
        CLI::App* sub = app.add_subcommand(
            "id", "Estimate intrinsic dimension of an embedding file (TWO-NN)");
        static std::string emb_path;
        static std::string out_path;
        static std::size_t subsample = 2000;
        static std::uint64_t seed = 0;
        sub->add_option("--embeddings", emb_path, "EMB1 embedding file")->required();
        sub->add_option("--subsample", subsample, "Point cap for the estimate")
            ->capture_default_str();
        sub->add_option("--seed", seed, "Subsampling seed")->capture_default_str();
        sub->add_option("--out", out_path, "Report JSON path");
        sub->callback([&] {
            runner = [&] {
                const auto rep = traject::pipeline::run_id(emb_path, subsample, seed, out_path);
                std::cout << "intrinsic dimension: " << rep.estimate.dim << " (n_used "
                          << rep.estimate.n_used << ")\n";
                for (const std::string& w : rep.warnings) {
                    std::cerr << "warning: " << w << '\n';
                }
            };
        });
    }

    // sweep
    {
        CLI::App* sub = app.add_subcommand(
            "sweep", "Fidelity and diagnostics over a grid of k, alpha, n_dcs values");
        static traject::pipeline::SweepGrid grid;
        add_input_options(sub, cfg);
        add_graph_options(sub, cfg, root_spec);
        add_sample_options(sub, cfg);
        sub->add_option("--out", cfg.out_path, "Report JSON path (CSV sidecar shares its stem)")
            ->required();
        sub->add_option("--model-name", cfg.model_name, "Model label used in joined tables")
            ->capture_default_str();
        sub->add_option("--k-grid", grid.ks, "k values, comma separated")->delimiter(',');
        sub->add_option("--alpha-grid", grid.alphas, "alpha values, comma separated")
            ->delimiter(',');
        sub->add_option("--n-dcs-grid", grid.n_dcs, "n_dcs values, comma separated")
            ->delimiter(',');
        sub->callback([&] {
            runner = [&] {
                parse_root_policy(root_spec, cfg);
                const auto rep = traject::pipeline::run_sweep(cfg, grid);
                std::size_t failed = 0;
                for (const auto& p : rep.points) {
                    if (!p.ok) {
                        ++failed;
                    }
                }
                std::cout << rep.points.size() << " grid points";
                if (failed > 0) {
                    std::cout << ", " << failed << " failed";
                }
                std::cout << "\nreport: " << cfg.out_path << '\n';
                for (const std::string& w : rep.warnings) {
                    std::cerr << "warning: " << w << '\n';
                }
            };
        });
    }

    // emergence
    {
        CLI::App* sub = app.add_subcommand(
            "emergence", "Track fidelity and intrinsic dimension across layer depths");
        static std::vector<std::string> raw_layers;
        sub->add_option("--manifest", cfg.manifest_path, "Shared patch manifest CSV")->required();
        sub->add_option("--spec", cfg.spec_path, "Progression spec JSON")->required();
        sub->add_option("--layer", raw_layers,
                        "Layer as depth:path with depth in [0,1]; repeatable")
            ->required();
        add_graph_options(sub, cfg, root_spec);
        add_sample_options(sub, cfg);
        sub->add_option("--out", cfg.out_path, "Report JSON path (CSV sidecar shares its stem)")
            ->required();
        sub->add_option("--model-name", cfg.model_name, "Model label used in joined tables")
            ->capture_default_str();
        sub->callback([&] {
            runner = [&] {
                parse_root_policy(root_spec, cfg);
                const auto rep =
                    traject::pipeline::run_emergence(cfg, parse_layers(raw_layers));
                for (const auto& layer : rep.layers) {
                    std::cout << "depth " << layer.depth << ": tau " << format2(layer.tau)
                              << ", manifold id " << format2(layer.manifold_id) << '\n';
                }
                std::cout << "report: " << cfg.out_path << '\n';
                for (const std::string& w : rep.warnings) {
                    std::cerr << "warning: " << w << '\n';
                }
            };
        });
    }

    // probe
    {
        CLI::App* sub = app.add_subcommand(
            "probe", "Few-shot linear probe macro-F1 on the slide-aware sample");
        static traject::probe::FewShotConfig pcfg;
        add_input_options(sub, cfg);
        add_sample_options(sub, cfg);
        sub->add_option("--out", cfg.out_path, "Report JSON path")->required();
        sub->add_option("--model-name", cfg.model_name, "Model label used in joined tables")
            ->capture_default_str();
        sub->add_option("--shots", pcfg.shots, "Training examples per class")
            ->capture_default_str();
        sub->add_option("--trials", pcfg.trials, "Independent split trials")
            ->capture_default_str();
        sub->add_option("--l2", pcfg.l2_strength, "Inverse L2 regularization strength")
            ->capture_default_str();
        sub->add_option("--max-iters", pcfg.max_iters, "Optimizer iteration cap")
            ->capture_default_str();
        sub->add_option("--tol", pcfg.tol, "Gradient norm tolerance")->capture_default_str();
        sub->callback([&] {
            runner = [&] {
                pcfg.seed = cfg.seed;
                const auto rep = traject::pipeline::run_probe(cfg, pcfg);
                std::cout << "mean macro-F1: " << format2(rep.result.mean_f1) << " over "
                          << rep.trials << " trials\n";
                std::cout << "report: " << cfg.out_path << '\n';
                for (const std::string& w : rep.warnings) {
                    std::cerr << "warning: " << w << '\n';
                }
            };
        });
    }

    // correlate
    {
        CLI::App* sub = app.add_subcommand(
            "correlate", "Correlate fidelity with few-shot probe quality across models");
        static std::vector<std::string> inputs;
        static traject::pipeline::Protocol protocol = traject::pipeline::Protocol::within;
        static std::string out_path;
        sub->add_option("inputs", inputs, "Fidelity/probe report or table JSON files")
            ->required();
        static const std::map<std::string, traject::pipeline::Protocol> pmap{
            {"within", traject::pipeline::Protocol::within},
            {"loo", traject::pipeline::Protocol::loo},
            {"loo-f1", traject::pipeline::Protocol::loo_f1}};
        sub->add_option("--protocol", protocol,
                        "within (per-cohort), loo (leave-one-out vs mean tau), loo-f1 "
                        "(leave-one-out vs mean F1)")
            ->transform(CLI::CheckedTransformer(pmap, CLI::ignore_case));
        sub->add_option("--out", out_path, "Report JSON path");
        sub->callback([&] {
            runner = [&] {
                const auto rep = traject::pipeline::run_correlate(inputs, protocol, out_path);
                std::cout << "protocol: " << rep.protocol << '\n';
                for (std::size_t i = 0; i < rep.targets.size(); ++i) {
                    std::cout << "  " << rep.targets[i] << ": rho " << format2(rep.rho[i])
                              << '\n';
                }
                std::cout << "mean rho: " << format2(rep.mean_rho) << '\n';
                if (!out_path.empty()) {
                    std::cout << "report: " << out_path << '\n';
                }
            };
        });
    }

    // compare
    {
        CLI::App* sub = app.add_subcommand(
            "compare", "Join fidelity and probe reports into one cross-model table");
        static std::vector<std::string> inputs;
        static std::string out_path;
        sub->add_option("inputs", inputs, "Fidelity/probe report or table JSON files")
            ->required();
        sub->add_option("--out", out_path, "Table JSON path");
        sub->callback([&] {
            runner = [&] {
                const auto table = traject::pipeline::run_compare(inputs, out_path);
                print_table(table);
                if (!out_path.empty()) {
                    std::cout << "table: " << out_path << '\n';
                }
            };
        });
    }

    // synth
    {
        CLI::App* sub = app.add_subcommand(
            "synth", "Generate a synthetic progression with known latent order");
        static traject::synth::SyntheticConfig scfg;
        static std::string prefix;
        sub->add_option("--classes", scfg.classes, "Number of ordinal classes")
            ->capture_default_str();
        sub->add_option("--per-class", scfg.per_class, "Points per class")->capture_default_str();
        sub->add_option("--dim", scfg.dim, "Embedding dimension")->capture_default_str();
        sub->add_option("--curve-modes", scfg.curve_modes, "Sinusoidal curve components")
            ->capture_default_str();
        sub->add_option("--noise", scfg.noise_sigma, "Expected noise norm")
            ->capture_default_str();
        sub->add_option("--slides-per-class", scfg.slides_per_class, "Slides per class")
            ->capture_default_str();
        sub->add_option("--seed", scfg.seed, "Generation seed")->capture_default_str();
        sub->add_option("--out", prefix,
                        "Output prefix for .emb1, .manifest.csv, .spec.json, .latent.csv")
            ->required();
        sub->callback([&] {
            runner = [&] {
                const traject::synth::SyntheticSet set = traject::synth::generate(scfg);
                traject::ingest::save_embeddings(prefix + ".emb1", set.embeddings);
                traject::ingest::save_manifest(prefix + ".manifest.csv", set.records);
                traject::ingest::save_progression_spec(prefix + ".spec.json", set.spec);
                std::ofstream latent(prefix + ".latent.csv", std::ios::trunc);
                if (!latent) {
                    throw traject::InputError(prefix + ".latent.csv: cannot open for writing");
                }
                latent << std::setprecision(17) << "patch_id,latent_s\n";
                for (std::size_t i = 0; i < set.latent.size(); ++i) {
                    latent << traject::ingest::detail::csv_escape(set.records[i].patch_id) << ','
                           << set.latent[i] << '\n';
                }
                if (!latent) {
                    throw traject::InputError(prefix + ".latent.csv: write failed");
                }
                std::cout << set.records.size() << " points, attainable tau ceiling "
                          << format2(set.tau_ceiling) << '\n';
                std::cout << "wrote " << prefix << ".emb1, .manifest.csv, .spec.json, .latent.csv"
                          << '\n';
            };
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (thread_cap > 0) {
        traject::threads::set_count(thread_cap);
    }

    try {
        runner();
    } catch (const traject::InputError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const traject::AnalysisError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
