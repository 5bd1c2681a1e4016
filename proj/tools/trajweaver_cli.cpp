// trajweaver command-line driver: synth, train, recover, eval.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <trajweaver/trajweaver.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace trajweaver;

namespace {

enum ExitCode { kOk = 0, kValidation = 2, kNumeric = 3, kIo = 4 };

fs::path ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir);
    return fs::path(dir);
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << j.dump(2) << '\n';
    if (!os) throw IoError("write failed: " + path.string());
}

json read_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("file not found or unreadable: " + path);
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw ParseError(1, path + ": " + e.what());
    }
}

json echo(const std::string& command, const std::vector<std::string>& argv, json params) {
    return {{"command", command}, {"argv", argv}, {"params", std::move(params)}};
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
    std::size_t n = 2000;
    std::size_t len = 64;
    std::uint64_t seed = 1;
    std::string out = "data";
};

int cmd_synth(const SynthArgs& a, const std::vector<std::string>& argv) {
    const auto data = synth_generate(a.n, a.len, a.seed);
    const auto dir = ensure_dir(a.out);
    save_jsonl(data, (dir / "trajectories.jsonl").string());
    write_json(dir / "synth_config.json",
               echo("synth", argv, {{"n", a.n}, {"len", a.len}, {"seed", a.seed}, {"out", a.out}}));

    std::size_t points = 0;
    double dt = 0.0;
    for (const auto& tr : data) {
        points += tr.size();
        dt += (tr.points.back().time - tr.points.front().time) / static_cast<double>(tr.size() - 1);
    }
    const NormStats box = data.empty() ? NormStats{} : NormStats::from_dataset(data);
    std::cout << std::left << std::setw(24) << "dataset" << (dir / "trajectories.jsonl").string() << '\n'
              << std::setw(24) << "trajectories" << data.size() << '\n'
              << std::setw(24) << "points" << points << '\n'
              << std::setw(24) << "points / trajectory" << a.len << '\n'
              << std::setw(24) << "mean interval (s)" << std::fixed << std::setprecision(2)
              << (data.empty() ? 0.0 : dt / static_cast<double>(data.size())) << '\n'
              << std::setw(24) << "lng range" << std::setprecision(5) << box.lng_min << " .. " << box.lng_max << '\n'
              << std::setw(24) << "lat range" << box.lat_min << " .. " << box.lat_max << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    std::string data;
    std::string out = "run";
    TrainConfig cfg;
    DenoiserConfig net;
    std::string batch_mode = "uniform";
    std::string fusion = "add";
    bool no_state = false;
    std::size_t log_every = 50;
};

int cmd_train(TrainArgs a, const std::vector<std::string>& argv) {
    a.cfg.batch_mode = parse_batch_mode(a.batch_mode);
    a.net.fusion = parse_fusion_mode(a.fusion);
    a.net.state_enabled = !a.no_state;
    a.net.T = a.cfg.T;
    a.cfg.validate();
    a.net.validate();
    auto data = load_jsonl(a.data);
    const auto dir = ensure_dir(a.out);

    Trainer trainer(std::move(data), a.cfg, a.net, EmbedderRegistry::defaults());
    write_json(dir / "train_config.json",
               echo("train", argv,
                    {{"data", a.data}, {"out", a.out}, {"train", trainer.config()},
                     {"model", trainer.model().config()}, {"log_every", a.log_every}}));
    write_json(dir / "norm.json", trainer.norm());

    std::vector<std::size_t> hist(a.cfg.T, 0);
    BatchManager bm(a.cfg.batch_mode, a.cfg.batch_size, a.cfg.T, a.cfg.k);
    std::cout << "parameters " << trainer.model().net().parameter_count() << " (state machinery "
              << trainer.model().net().parameter_count() - trainer.model().net().parameter_count(false) << ")\n";
    while (trainer.iteration() < a.cfg.max_iterations) {
        for (const auto& s : trainer.slots())
            for (long t : bm.trained_steps(s.t)) ++hist[static_cast<std::size_t>(t)];
        trainer.step();
        const auto& row = trainer.log().back();
        if (a.log_every > 0 && (row.iteration % a.log_every == 0 || row.iteration == a.cfg.max_iterations))
            std::cout << "iter " << std::setw(6) << row.iteration << "  loss " << std::scientific << std::setprecision(4)
                      << row.loss << std::defaultfloat << "  mean_t " << std::fixed << std::setprecision(1)
                      << row.mean_t << std::defaultfloat << "  " << std::setprecision(1) << std::fixed
                      << row.wall_seconds << "s" << std::defaultfloat << '\n';
    }

    save_checkpoint(trainer.checkpoint(), (dir / "checkpoint.json").string());
    write_log_csv(trainer.log(), (dir / "train_log.csv").string());

    const std::size_t bins = std::min<std::size_t>(10, a.cfg.T);
    std::vector<double> binned(bins, 0.0);
    for (std::size_t t = 0; t < a.cfg.T; ++t) binned[t * bins / a.cfg.T] += static_cast<double>(hist[t]);
    double mean = 0.0;
    for (double v : binned) mean += v / static_cast<double>(bins);
    double worst = 0.0;
    std::cout << "trained-t histogram (" << bins << " bins):";
    for (double v : binned) {
        std::cout << ' ' << static_cast<std::size_t>(v);
        if (mean > 0.0) worst = std::max(worst, std::abs(v - mean) / mean);
    }
    std::cout << "\nmax relative deviation from flat " << std::fixed << std::setprecision(3) << worst << '\n';
    std::cout << "checkpoint " << (dir / "checkpoint.json").string() << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------
// recover

struct RecoverArgs {
    std::string ckpt;
    std::string data;
    std::string out = "recovered";
    std::string sampler = "sp-ddim";
    std::size_t steps = 21;
    double sparsity = 0.5;
    std::uint64_t seed = 0;
    std::size_t batch = 64;
};

int cmd_recover(const RecoverArgs& a, const std::vector<std::string>& argv) {
    SamplerSpec spec{parse_sampler_kind(a.sampler), a.steps, a.seed};
    if (!(a.sparsity > 0.0 && a.sparsity < 1.0)) throw InvalidArgument("--sparsity must lie in (0, 1)");
    if (a.batch < 1) throw InvalidArgument("--batch must be positive");
    const Checkpoint ckpt = load_checkpoint(a.ckpt);
    if (spec.kind == SamplerKind::DDPM && a.steps != ckpt.schedule.T()) spec.steps = ckpt.schedule.T();
    spec.validate(ckpt.schedule.T());
    const auto dense = load_jsonl(a.data);
    const auto dir = ensure_dir(a.out);

    std::vector<RecoveryTask> tasks;
    std::vector<std::vector<double>> masks;
    const std::uint64_t sp_seed = derive_seed(a.seed, "sparsify");
    for (std::size_t i = 0; i < dense.size(); ++i) {
        const auto sp = sparsify(dense[i], a.sparsity, derive_seed(sp_seed, i));
        const auto merged = merge_timeline(sp.sparse, sp.query);
        masks.push_back(build_mask(sp.sparse.size(), merged.query_positions, merged.times.size()));
        tasks.push_back({sp.sparse, sp.query, {}, ckpt.norm});
    }

    std::vector<Trajectory> recovered;
    json batches = json::array();
    double total = 0.0;
    for (std::size_t start = 0, chunk = 0; start < tasks.size(); start += a.batch, ++chunk) {
        const std::size_t end = std::min(tasks.size(), start + a.batch);
        SamplerSpec s = spec;
        s.seed = derive_seed(derive_seed(a.seed, "rollout"), chunk);
        const auto t0 = std::chrono::steady_clock::now();
        auto part = recover(std::span<const RecoveryTask>(tasks).subspan(start, end - start), ckpt, s, a.batch);
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        total += wall;
        batches.push_back({{"first", start}, {"count", end - start}, {"wall_seconds", wall}});
        for (auto& tr : part) recovered.push_back(std::move(tr));
    }

    {
        const auto path = dir / "recovered.jsonl";
        std::ofstream os(path);
        if (!os) throw IoError("cannot open " + path.string() + " for writing");
        for (std::size_t i = 0; i < recovered.size(); ++i) {
            json j = trajectory_to_json(recovered[i]);
            j["mask"] = masks[i];
            os << j.dump() << '\n';
        }
        if (!os) throw IoError("write failed: " + path.string());
    }
    std::vector<Trajectory> sparse;
    for (const auto& t : tasks) sparse.push_back(t.sparse);
    save_jsonl(sparse, (dir / "sparse.jsonl").string());

    const json meta = {{"sampler", to_string(spec.kind)}, {"steps", spec.steps}, {"seed", a.seed},
                       {"trajectories", recovered.size()}, {"wall_seconds", total}, {"batches", batches}};
    write_json(dir / "recover_meta.json", meta);
    write_json(dir / "recover_config.json",
               echo("recover", argv,
                    {{"ckpt", a.ckpt}, {"data", a.data}, {"out", a.out}, {"sampler", to_string(spec.kind)},
                     {"steps", spec.steps}, {"sparsity", a.sparsity}, {"seed", a.seed}, {"batch", a.batch}}));
    std::cout << "recovered " << recovered.size() << " trajectories with " << to_string(spec.kind) << " ("
              << spec.steps << " steps) in " << std::fixed << std::setprecision(3) << total << " s\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    std::string recovered;
    std::string truth;
    std::string norm;
    std::string out = "eval";
    std::size_t plot_n = 3;
};

struct RecoveredSet {
    std::vector<Trajectory> trajectories;
    std::vector<std::vector<double>> masks;
};

RecoveredSet load_recovered(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("file not found or unreadable: " + path);
    RecoveredSet r;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = json::parse(line);
            Trajectory tr = trajectory_from_json(j);
            validate_trajectory(tr, "trajectory " + std::to_string(r.trajectories.size()));
            std::vector<double> mask = j.contains("mask") ? j.at("mask").get<std::vector<double>>()
                                                          : std::vector<double>(tr.size(), 1.0);
            if (mask.size() != tr.size()) throw ParseError(lineno, "mask length differs from point count");
            r.masks.push_back(std::move(mask));
            r.trajectories.push_back(std::move(tr));
        } catch (const json::exception& e) {
            throw ParseError(lineno, e.what());
        } catch (const InvalidArgument& e) {
            throw ParseError(lineno, e.what());
        }
    }
    return r;
}

Trajectory rows_where(const Trajectory& tr, std::span<const double> mask, double value) {
    Trajectory out;
    for (std::size_t i = 0; i < tr.size(); ++i)
        if (mask[i] == value) out.points.push_back(tr.points[i]);
    return out;
}

void write_overlay_svg(const fs::path& path, const Trajectory& dense, const Trajectory& sparse,
                       const Trajectory& recovered) {
    double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
    for (const auto* tr : {&dense, &sparse, &recovered})
        for (const auto& p : tr->points) {
            x0 = std::min(x0, p.lng), x1 = std::max(x1, p.lng);
            y0 = std::min(y0, p.lat), y1 = std::max(y1, p.lat);
        }
    const double size = 360.0, pad = 20.0;
    const double span = std::max({x1 - x0, y1 - y0, 1e-12});
    const auto px = [&](double lng) { return pad + (lng - x0) / span * size; };
    const auto py = [&](double lat) { return pad + size - (lat - y0) / span * size; };
    const auto polyline = [&](const Trajectory& tr) {
        std::ostringstream os;
        os << std::fixed << std::setprecision(2);
        for (const auto& p : tr.points) os << px(p.lng) << ',' << py(p.lat) << ' ';
        return os.str();
    };

    const double W = 3 * (size + 2 * pad);
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << size + 3 * pad << "\">\n";
    const char* titles[3] = {"Dense traj", "Sparse traj", "Recovered traj"};
    const Trajectory* panels[3] = {&dense, &sparse, &recovered};
    const char* colors[3] = {"#333333", "#d62728", "#1f77b4"};
    for (int k = 0; k < 3; ++k) {
        os << "<g transform=\"translate(" << k * (size + 2 * pad) << ",0)\">\n";
        os << "<rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << size << "\" height=\"" << size
           << "\" fill=\"none\" stroke=\"#bbbbbb\"/>\n";
        os << "<text x=\"" << pad << "\" y=\"" << size + 2.6 * pad << "\" font-size=\"14\">" << titles[k]
           << "</text>\n";
        if (k == 2)
            os << "<polyline points=\"" << polyline(dense) << "\" fill=\"none\" stroke=\"#cccccc\" stroke-width=\"3\"/>\n";
        os << "<polyline points=\"" << polyline(*panels[k]) << "\" fill=\"none\" stroke=\"" << colors[k]
           << "\" stroke-width=\"1.5\"/>\n";
        for (const auto& p : panels[k]->points)
            os << "<circle cx=\"" << px(p.lng) << "\" cy=\"" << py(p.lat) << "\" r=\"2\" fill=\"" << colors[k]
               << "\"/>\n";
        os << "</g>\n";
    }
    os << "</svg>\n";
}

int cmd_eval(const EvalArgs& a, const std::vector<std::string>& argv) {
    const auto rec = load_recovered(a.recovered);
    const auto truth = load_jsonl(a.truth);
    if (rec.trajectories.size() != truth.size())
        throw ValidationError("recovered set has " + std::to_string(rec.trajectories.size()) +
                              " trajectories, truth has " + std::to_string(truth.size()));
    const NormStats norm = a.norm.empty() ? NormStats::from_dataset(truth) : read_json(a.norm).get<NormStats>();
    norm.validate();
    const auto dir = ensure_dir(a.out);

    EvalReport report = evaluate(rec.trajectories, truth, rec.masks, norm);

    std::vector<Trajectory> sparse, baseline;
    SpeedDistance agg_sparse, agg_rec, agg_truth, agg_base;
    bool have_sparse = true;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        Trajectory sp = rows_where(rec.trajectories[i], rec.masks[i], 0.0);
        if (sp.size() < 2) {
            have_sparse = false;
            break;
        }
        const Trajectory q = rows_where(rec.trajectories[i], rec.masks[i], 1.0);
        Query query;
        for (const auto& p : q.points) query.times.push_back(p.time);
        baseline.push_back(baseline_linear({sp, query, {}, norm}));
        sparse.push_back(std::move(sp));
    }
    const auto accumulate = [](SpeedDistance& acc, const Trajectory& tr, double n) {
        const auto sd = speed_and_distance(tr);
        acc.avg_speed_mps += sd.avg_speed_mps / n;
        acc.distance_km += sd.distance_km / n;
    };
    const double n = static_cast<double>(truth.size());
    for (std::size_t i = 0; i < truth.size(); ++i) {
        accumulate(agg_rec, rec.trajectories[i], n);
        accumulate(agg_truth, truth[i], n);
        if (have_sparse) {
            accumulate(agg_sparse, sparse[i], n);
            accumulate(agg_base, baseline[i], n);
        }
    }

    report.config = echo("eval", argv,
                         {{"recovered", a.recovered}, {"truth", a.truth}, {"norm", a.norm}, {"out", a.out},
                          {"plot_n", a.plot_n}});
    json j = report.to_json();
    const auto sd_json = [](const SpeedDistance& s) {
        return json{{"avg_speed_mps", s.avg_speed_mps}, {"distance_km", s.distance_km}};
    };
    j["speed_distance"] = {{"recovered", sd_json(agg_rec)}, {"truth", sd_json(agg_truth)}};
    if (have_sparse) {
        j["speed_distance"]["sparse"] = sd_json(agg_sparse);
        const EvalReport base = evaluate(baseline, truth, rec.masks, norm);
        j["linear_baseline"] = {{"mse", base.mse}, {"ndtw", base.ndtw}, {"jsd", base.jsd}};
    }
    write_json(dir / "report.json", j);
    write_json(dir / "eval_config.json", report.config);

    std::ostringstream table;
    table << report.to_table() << '\n';
    table << std::left << std::setw(16) << "trajectories" << std::right << std::setw(16) << "avg speed (m/s)"
          << std::setw(16) << "distance (km)" << '\n'
          << std::string(48, '-') << '\n'
          << std::fixed << std::setprecision(4);
    if (have_sparse)
        table << std::left << std::setw(16) << "sparse" << std::right << std::setw(16) << agg_sparse.avg_speed_mps
              << std::setw(16) << agg_sparse.distance_km << '\n';
    table << std::left << std::setw(16) << "recovered" << std::right << std::setw(16) << agg_rec.avg_speed_mps
          << std::setw(16) << agg_rec.distance_km << '\n';
    table << std::left << std::setw(16) << "truth" << std::right << std::setw(16) << agg_truth.avg_speed_mps
          << std::setw(16) << agg_truth.distance_km << '\n';
    {
        std::ofstream os(dir / "report.txt");
        if (!os) throw IoError("cannot write " + (dir / "report.txt").string());
        os << table.str();
    }
    std::cout << table.str();

    const std::size_t plots = std::min(a.plot_n, truth.size());
    if (plots > 0) {
        const auto pdir = ensure_dir((dir / "plots").string());
        for (std::size_t i = 0; i < plots; ++i) {
            char name[32];
            std::snprintf(name, sizeof name, "traj_%03zu.svg", i);
            write_overlay_svg(pdir / name, truth[i], have_sparse ? sparse[i] : Trajectory{}, rec.trajectories[i]);
        }
    }
    return kOk;
}

int run(int argc, char** argv) {
    CLI::App app{"Sparse-to-dense GPS trajectory recovery with a state-propagating diffusion model"};
    app.require_subcommand(1);
    const std::vector<std::string> args(argv, argv + argc);

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "generate a synthetic trajectory corpus");
    synth->add_option("--n", sa.n, "number of trajectories")->capture_default_str();
    synth->add_option("--len", sa.len, "points per trajectory (>= 8)")->capture_default_str();
    synth->add_option("--seed", sa.seed, "random seed")->capture_default_str();
    synth->add_option("--out", sa.out, "output directory")->capture_default_str();

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "train a denoiser on a JSONL corpus");
    train_cmd->add_option("--data", ta.data, "training trajectories (JSONL)")->required();
    train_cmd->add_option("--out", ta.out, "output directory")->capture_default_str();
    train_cmd->add_option("--iters", ta.cfg.max_iterations, "training iterations")->capture_default_str();
    train_cmd->add_option("--batch-mode", ta.batch_mode, "shared|consecutive|uniform")->capture_default_str();
    train_cmd->add_option("--steps-per-iter", ta.cfg.k, "adjacent steps trained jointly (k)")->capture_default_str();
    train_cmd->add_option("--fusion", ta.fusion, "add|concat|cross-attention")->capture_default_str();
    train_cmd->add_option("--T", ta.cfg.T, "diffusion steps")->capture_default_str();
    train_cmd->add_option("--beta-start", ta.cfg.beta_start)->capture_default_str();
    train_cmd->add_option("--beta-end", ta.cfg.beta_end)->capture_default_str();
    train_cmd->add_option("--lr", ta.cfg.learning_rate, "learning rate")->capture_default_str();
    train_cmd->add_option("--clip", ta.cfg.grad_clip, "gradient-norm clip")->capture_default_str();
    train_cmd->add_option("--batch", ta.cfg.batch_size, "batch slots")->capture_default_str();
    train_cmd->add_option("--sparsity", ta.cfg.sparsity, "fraction of points removed")->capture_default_str();
    train_cmd->add_option("--seed", ta.cfg.seed, "random seed")->capture_default_str();
    train_cmd->add_flag("--lazy-chain", ta.cfg.lazy_noise_chain, "fold noise chains on demand");
    train_cmd->add_option("--levels", ta.net.levels)->capture_default_str();
    train_cmd->add_option("--width", ta.net.base_width, "base channel width")->capture_default_str();
    train_cmd->add_option("--res-blocks", ta.net.res_blocks)->capture_default_str();
    train_cmd->add_option("--heads", ta.net.heads)->capture_default_str();
    train_cmd->add_option("--time-width", ta.net.time_width)->capture_default_str();
    train_cmd->add_flag("--no-state", ta.no_state, "sever the propagation state");
    train_cmd->add_option("--log-every", ta.log_every)->capture_default_str();

    RecoverArgs ra;
    auto* recover_cmd = app.add_subcommand("recover", "recover sparsified trajectories with a checkpoint");
    recover_cmd->add_option("--ckpt", ra.ckpt, "checkpoint file")->required();
    recover_cmd->add_option("--data", ra.data, "dense trajectories to sparsify and recover (JSONL)")->required();
    recover_cmd->add_option("--out", ra.out, "output directory")->capture_default_str();
    recover_cmd->add_option("--sampler", ra.sampler, "ddpm|ddim|sp-ddim")->capture_default_str();
    recover_cmd->add_option("--steps", ra.steps, "visited steps (ddpm: all)")->capture_default_str();
    recover_cmd->add_option("--sparsity", ra.sparsity)->capture_default_str();
    recover_cmd->add_option("--seed", ra.seed)->capture_default_str();
    recover_cmd->add_option("--batch", ra.batch, "trajectories per rollout batch")->capture_default_str();

    EvalArgs ea;
    auto* eval_cmd = app.add_subcommand("eval", "score recovered trajectories against the truth");
    eval_cmd->add_option("--recovered", ea.recovered, "recovered JSONL (with masks)")->required();
    eval_cmd->add_option("--truth", ea.truth, "dense truth JSONL")->required();
    eval_cmd->add_option("--norm", ea.norm, "normalization stats JSON (default: from truth)");
    eval_cmd->add_option("--out", ea.out, "output directory")->capture_default_str();
    eval_cmd->add_option("--plot-n", ea.plot_n, "overlay plots to emit")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kValidation;
    }

    if (*synth) return cmd_synth(sa, args);
    if (*train_cmd) return cmd_train(ta, args);
    if (*recover_cmd) return cmd_recover(ra, args);
    if (*eval_cmd) return cmd_eval(ea, args);
    return kValidation;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kIo;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure at step " << e.step() << ": " << e.what() << '\n';
        return kNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kValidation;
    }
}
