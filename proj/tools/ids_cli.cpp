// Batch CLI: dataset synthesis, training, inference, evaluation, and
// gradient verification.

#include <CLI11.hpp>

#include "ids/dcp.hpp"
#include "ids/gradcheck.hpp"
#include "ids/hazegen.hpp"
#include "ids/image_io.hpp"
#include "ids/ids_net.hpp"
#include "ids/metrics.hpp"
#include "ids/trainer.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace ids;

namespace {

using Manifest = std::vector<std::pair<std::string, std::string>>;

void write_manifest(const std::string& dir, const Manifest& rows,
                    std::chrono::steady_clock::time_point t0) {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    fs::create_directories(dir);
    std::ofstream os(fs::path(dir) / "manifest.tsv");
    for (const auto& [k, v] : rows) os << k << '\t' << v << '\n';
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", secs);
    os << "duration_s\t" << buf << '\n';
}

int threads_from_env() {
    const char* env = std::getenv("IDS_THREADS");
    if (!env) return 1;
    const int n = std::atoi(env);
    return n >= 1 ? n : 1;
}

// Flat key=value overrides; flags the user passed on the command line win.
std::map<std::string, std::string> read_config_file(const std::string& path) {
    std::map<std::string, std::string> kv;
    if (path.empty()) return kv;
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read config file: " + path);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config line is not key=value: " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

struct TrainFlags {
    std::string data, scheme = "soft", preset = "desk", out, resume, config;
    std::uint64_t seed = 0;
    int epochs = -1, batch = -1, patch = -1;
    double lr0 = -1.0;
};

void apply_config_file(TrainFlags& f, CLI::App* cmd) {
    const auto kv = read_config_file(f.config);
    auto take = [&](const char* key, const char* flag, auto setter) {
        auto it = kv.find(key);
        if (it != kv.end() && cmd->count(flag) == 0) setter(it->second);
    };
    take("scheme", "--scheme", [&](const std::string& v) { f.scheme = v; });
    take("preset", "--preset", [&](const std::string& v) { f.preset = v; });
    take("seed", "--seed", [&](const std::string& v) { f.seed = std::stoull(v); });
    take("epochs", "--epochs", [&](const std::string& v) { f.epochs = std::stoi(v); });
    take("batch", "--batch", [&](const std::string& v) { f.batch = std::stoi(v); });
    take("patch", "--patch", [&](const std::string& v) { f.patch = std::stoi(v); });
    take("lr0", "--lr0", [&](const std::string& v) { f.lr0 = std::stod(v); });
}

NetworkConfig network_config_for(const std::string& preset, const std::string& scheme) {
    const HandoffMode mode =
        scheme == "hard" ? HandoffMode::image : HandoffMode::feature;
    // "paper" selects the paper-scale training profile with the medium depth.
    const std::string depth = preset == "paper" ? "medium" : preset;
    return NetworkConfig::from_preset_name(depth, mode);
}

TrainConfig train_config_for(const TrainFlags& f) {
    const Scheme scheme = f.scheme == "hard" ? Scheme::hard : Scheme::soft;
    TrainConfig cfg = f.preset == "desk" ? TrainConfig::desk_preset(scheme)
                                         : TrainConfig::paper_profile(scheme);
    cfg.seed = f.seed;
    if (f.epochs > 0) cfg.epochs = f.epochs;
    if (f.batch > 0) cfg.batch_size = f.batch;
    if (f.patch > 0) cfg.patch = f.patch;
    if (f.lr0 > 0.0) cfg.lr0 = float(f.lr0);
    return cfg;
}

std::vector<std::string> png_names(const std::string& dir) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".png") names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    return names;
}

// ---- commands --------------------------------------------------------------

int cmd_synth(const std::string& out, int count, const std::string& size,
              const std::string& profile, std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    int h = 0, w = 0;
    if (std::sscanf(size.c_str(), "%d,%d", &h, &w) != 2 || h < 8 || w < 8)
        throw std::runtime_error("invalid --size, expected H,W with H,W >= 8: " + size);
    const HazeProfile prof =
        profile == "outdoor" ? HazeProfile::outdoor : HazeProfile::indoor;

    std::vector<ScenePair> train, val;
    const int n_val = count / 5;  // 80/20, remainder goes to train
    for (int i = 0; i < count; ++i) {
        ScenePair pair = make_scene_pair(seed + std::uint64_t(i), h, w, prof);
        (i < count - n_val ? train : val).push_back(std::move(pair));
    }
    write_dataset(out, train, val);

    Manifest m{{"command", "synth"},   {"out", out},
               {"count", std::to_string(count)}, {"size", size},
               {"profile", profile},   {"seed", std::to_string(seed)},
               {"train_pairs", std::to_string(train.size())},
               {"val_pairs", std::to_string(val.size())}};
    write_manifest(out, m, t0);
    std::cout << "wrote " << train.size() << " train + " << val.size()
              << " val pairs under " << out << "\n";
    return 0;
}

int cmd_train(TrainFlags& f) {
    const auto t0 = std::chrono::steady_clock::now();
    if (f.scheme != "hard" && f.scheme != "soft")
        throw std::runtime_error("--scheme must be hard or soft");
    Dataset train_set = load_dataset(f.data + "/train");
    Dataset val_set = load_dataset(f.data + "/val");
    if (train_set.pairs.size() < 2)
        throw std::runtime_error("need at least 2 training pairs in " + f.data);

    NetworkConfig net_cfg = network_config_for(f.preset, f.scheme);
    TrainConfig cfg = train_config_for(f);
    IdsModel model = build_network(net_cfg, cfg.seed);
    TrainResult r = train(model, cfg, train_set, val_set, f.out, f.resume);

    char num[64];
    Manifest m{{"command", "train"},     {"data", f.data},
               {"scheme", f.scheme},     {"preset", f.preset},
               {"depth", net_cfg.preset_name()},
               {"seed", std::to_string(cfg.seed)},
               {"epochs", std::to_string(cfg.epochs)},
               {"batch", std::to_string(cfg.batch_size)},
               {"patch", std::to_string(cfg.patch)},
               {"threads", std::to_string(threads_from_env())},
               {"out", f.out},
               {"final_checkpoint", r.final_checkpoint},
               {"best_checkpoint", r.best_checkpoint},
               {"log", r.log_path}};
    std::snprintf(num, sizeof num, "%.4f", r.final_val_psnr);
    m.emplace_back("final_val_psnr", num);
    std::snprintf(num, sizeof num, "%.6f", r.final_val_ssim);
    m.emplace_back("final_val_ssim", num);
    std::snprintf(num, sizeof num, "%.4f", r.best_val_psnr);
    m.emplace_back("best_val_psnr", num);
    write_manifest(f.out, m, t0);
    std::cout << "trained " << r.epochs_run << " epochs; final val PSNR "
              << r.final_val_psnr << " dB, SSIM " << r.final_val_ssim << "\n";
    return 0;
}

int cmd_dehaze(const std::string& ckpt, const std::string& in, const std::string& out,
               const std::string& method, const std::string& preset,
               const std::string& scheme) {
    const auto t0 = std::chrono::steady_clock::now();
    IdsModel model;
    if (method == "ids") {
        if (ckpt.empty()) throw std::runtime_error("--method ids requires --ckpt");
        model = build_network(network_config_for(preset, scheme), 0);
        AdamState adam;
        load_checkpoint(ckpt, model, adam);
    } else if (method != "dcp") {
        throw std::runtime_error("--method must be ids or dcp");
    }

    std::vector<std::pair<std::string, std::string>> jobs;  // (in, out)
    std::string manifest_dir;
    if (fs::is_directory(in)) {
        fs::create_directories(out);
        manifest_dir = out;
        for (const auto& name : png_names(in))
            jobs.emplace_back(in + "/" + name, out + "/" + name);
    } else {
        jobs.emplace_back(in, out);
        manifest_dir = fs::path(out).has_parent_path()
                           ? fs::path(out).parent_path().string()
                           : ".";
        fs::create_directories(manifest_dir);
    }
    if (jobs.empty()) throw std::runtime_error("no PNG inputs under " + in);

    for (const auto& [src, dst] : jobs) {
        Tensor hazy = read_png(src);
        Tensor result = method == "ids" ? dehaze_image(hazy, model) : dcp_dehaze(hazy);
        write_png(dst, result);
    }

    Manifest m{{"command", "dehaze"}, {"method", method}, {"in", in},
               {"out", out},          {"ckpt", ckpt},     {"preset", preset},
               {"scheme", scheme},    {"images", std::to_string(jobs.size())}};
    write_manifest(manifest_dir, m, t0);
    std::cout << "dehazed " << jobs.size() << " image(s) -> " << out << "\n";
    return 0;
}

int cmd_eval(const std::string& pred, const std::string& gt, const std::string& out) {
    const auto t0 = std::chrono::steady_clock::now();
    EvalReport report;
    const auto names = png_names(pred);
    if (names.empty()) throw std::runtime_error("no PNG files under " + pred);
    for (const auto& name : names) {
        const std::string gt_path = gt + "/" + name;
        if (!fs::exists(gt_path))
            throw std::runtime_error("missing ground-truth counterpart: " + gt_path);
        Tensor p = read_png(pred + "/" + name);
        Tensor g = read_png(gt_path);
        report.per_image.push_back({name, psnr(p, g), ssim(p, g)});
    }
    report.finalize();
    fs::create_directories(out);
    report.write_tsv(out + "/eval.tsv");

    char num[64];
    Manifest m{{"command", "eval"}, {"pred", pred}, {"gt", gt}, {"out", out},
               {"images", std::to_string(report.per_image.size())}};
    std::snprintf(num, sizeof num, "%.4f", report.mean_psnr_db);
    m.emplace_back("mean_psnr_db", num);
    std::snprintf(num, sizeof num, "%.6f", report.mean_ssim);
    m.emplace_back("mean_ssim", num);
    write_manifest(out, m, t0);
    std::cout << "eval: mean PSNR " << report.mean_psnr_db << " dB, mean SSIM "
              << report.mean_ssim << " (" << report.per_image.size() << " images)\n";
    return 0;
}

int cmd_gradcheck() {
    const auto results = run_gradcheck_suite();
    std::printf("%-40s %12s  %s\n", "op", "max_rel_err", "status");
    bool all_pass = true;
    for (const auto& r : results) {
        std::printf("%-40s %12.3e  %s\n", r.op.c_str(), r.max_rel_err,
                    r.pass ? "pass" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    std::printf("%zu checks, %s\n", results.size(), all_pass ? "all passed" : "FAILURES");
    return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Image dehazing toolkit: synthesis, training, inference, evaluation"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic hazy/clear dataset");
    std::string synth_out, synth_size = "48,48", synth_profile = "indoor";
    int synth_count = 10;
    std::uint64_t synth_seed = 0;
    synth->add_option("--out", synth_out, "Output directory")->required();
    synth->add_option("--count", synth_count, "Number of scene pairs")->required();
    synth->add_option("--size", synth_size, "Image size as H,W");
    synth->add_option("--profile", synth_profile, "Haze profile")
        ->check(CLI::IsMember({"indoor", "outdoor"}));
    synth->add_option("--seed", synth_seed, "Base RNG seed");

    // train
    auto* tr = app.add_subcommand("train", "Train a dehazing model");
    TrainFlags tf;
    tr->add_option("--data", tf.data, "Dataset directory (train/ + val/)")->required();
    tr->add_option("--scheme", tf.scheme, "Training scheme")
        ->check(CLI::IsMember({"hard", "soft"}));
    tr->add_option("--preset", tf.preset, "Model/training preset")
        ->check(CLI::IsMember({"desk", "shadow", "medium", "deep", "paper"}));
    tr->add_option("--out", tf.out, "Output directory")->required();
    tr->add_option("--seed", tf.seed, "RNG seed");
    tr->add_option("--resume", tf.resume, "Checkpoint to resume from");
    tr->add_option("--config", tf.config, "key=value config file");
    tr->add_option("--epochs", tf.epochs, "Override epoch count");
    tr->add_option("--batch", tf.batch, "Override batch size");
    tr->add_option("--patch", tf.patch, "Override patch size");
    tr->add_option("--lr0", tf.lr0, "Override initial learning rate");

    // dehaze
    auto* dh = app.add_subcommand("dehaze", "Dehaze PNG image(s)");
    std::string dh_ckpt, dh_in, dh_out, dh_method = "ids", dh_preset = "desk",
                dh_scheme = "soft";
    dh->add_option("--ckpt", dh_ckpt, "Model checkpoint (for --method ids)");
    dh->add_option("--in", dh_in, "Input PNG file or directory")->required();
    dh->add_option("--out", dh_out, "Output PNG file or directory")->required();
    dh->add_option("--method", dh_method, "Dehazing method")
        ->check(CLI::IsMember({"ids", "dcp"}));
    dh->add_option("--preset", dh_preset, "Model preset the checkpoint was built with")
        ->check(CLI::IsMember({"desk", "shadow", "medium", "deep", "paper"}));
    dh->add_option("--scheme", dh_scheme, "Training scheme the checkpoint used")
        ->check(CLI::IsMember({"hard", "soft"}));

    // eval
    auto* ev = app.add_subcommand("eval", "PSNR/SSIM of predictions vs ground truth");
    std::string ev_pred, ev_gt, ev_out = ".";
    ev->add_option("--pred", ev_pred, "Prediction directory")->required();
    ev->add_option("--gt", ev_gt, "Ground-truth directory")->required();
    ev->add_option("--out", ev_out, "Report output directory");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference verification of all ops");
    (void)gc;

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed())
            return cmd_synth(synth_out, synth_count, synth_size, synth_profile, synth_seed);
        if (tr->parsed()) {
            apply_config_file(tf, tr);
            return cmd_train(tf);
        }
        if (dh->parsed())
            return cmd_dehaze(dh_ckpt, dh_in, dh_out, dh_method, dh_preset, dh_scheme);
        if (ev->parsed()) return cmd_eval(ev_pred, ev_gt, ev_out);
        if (gc->parsed()) return cmd_gradcheck();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
