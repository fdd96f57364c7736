#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <iostream>

#include "dfa/cost_model.hpp"
#include "dfa/dataio.hpp"
#include "dfa/training.hpp"

namespace {

using namespace dfa;

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

std::pair<int64_t, int64_t> parse_geometry(const std::string& text) {
    int64_t h = 0, w = 0;
    char x = 0;
    std::istringstream is(text);
    if (!(is >> h >> x >> w) || (x != 'x' && x != 'X') || h < 1 || w < 1 || !is.eof())
        throw ConfigError("bad geometry '" + text + "', expected HxW");
    return {h, w};
}

Variant parse_variant(const std::string& v) {
    if (v == "A" || v == "a") return Variant::A;
    if (v == "B" || v == "b") return Variant::B;
    throw ConfigError("unknown variant '" + v + "'");
}

void print_resolved_config(const CLI::App* cmd) {
    std::cerr << "# resolved config for '" << cmd->get_name() << "'\n";
    for (const CLI::Option* opt : cmd->get_options()) {
        if (opt->get_name() == "--config" || opt->get_name() == "--help") continue;
        std::string value = opt->count() ? opt->results().back() : opt->get_default_str();
        std::cerr << "# " << opt->get_name() << "=" << value << "\n";
    }
}

std::array<double, 3> mean_from_config(const std::map<std::string, std::string>& cfg) {
    std::array<double, 3> mean{0.485, 0.456, 0.406};
    if (cfg.count("mean_r")) mean[0] = std::stod(cfg.at("mean_r"));
    if (cfg.count("mean_g")) mean[1] = std::stod(cfg.at("mean_g"));
    if (cfg.count("mean_b")) mean[2] = std::stod(cfg.at("mean_b"));
    return mean;
}

std::map<std::string, std::string> mean_to_config(const std::array<double, 3>& mean) {
    auto fmt = [](double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    };
    return {{"mean_r", fmt(mean[0])}, {"mean_g", fmt(mean[1])}, {"mean_b", fmt(mean[2])}};
}

struct BenchStats {
    double mean_ms = 0, median_ms = 0, p95_ms = 0, fps = 0;
};

BenchStats run_bench(const ModelSpec& spec, int64_t h, int64_t w, int iters, int warmup,
                     uint64_t seed) {
    DfaNet model(spec, seed);
    model.set_training(false);
    Tensor input = Tensor::randn({1, 3, h, w}, seed + 1, 0.0, 1.0);
    NoGradGuard ng;
    for (int i = 0; i < warmup; ++i) model.forward(input);
    std::vector<double> ms;
    ms.reserve(static_cast<size_t>(iters));
    for (int i = 0; i < iters; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        model.forward(input);
        const auto t1 = std::chrono::steady_clock::now();
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    BenchStats stats;
    for (double v : ms) stats.mean_ms += v;
    stats.mean_ms /= static_cast<double>(ms.size());
    std::vector<double> sorted = ms;
    std::sort(sorted.begin(), sorted.end());
    stats.median_ms = sorted[sorted.size() / 2];
    stats.p95_ms = sorted[std::min(sorted.size() - 1,
                                   static_cast<size_t>(std::ceil(0.95 * sorted.size())) - 1)];
    stats.fps = 1000.0 / stats.mean_ms;
    return stats;
}

int run(int argc, char** argv) {
    CLI::App app{"DFANet semantic segmentation: cost analysis, training, inference"};
    app.require_subcommand(1);

    int threads = 1;
    app.add_option("--threads", threads, "worker threads for conv kernels")
        ->envname("DFA_THREADS")
        ->capture_default_str();

    // ---- summary ----
    auto* sum = app.add_subcommand("summary", "print the analytic cost report");
    std::string sum_variant = "A", sum_input = "1024x1024", sum_format = "table";
    int sum_backbones = 3;
    int64_t sum_classes = 19;
    sum->set_config("--config");
    sum->add_option("--variant", sum_variant, "backbone variant (A|B)")->capture_default_str();
    sum->add_option("--backbones", sum_backbones, "number of stacked backbones")
        ->capture_default_str();
    sum->add_option("--input", sum_input, "input geometry HxW")->capture_default_str();
    sum->add_option("--classes", sum_classes, "number of classes")->capture_default_str();
    sum->add_option("--format", sum_format, "table|csv")->capture_default_str();
    bool sum_backbone_only = false;
    sum->add_flag("--backbone-only", sum_backbone_only, "exclude the decoder (backbone stack only)");

    // ---- gendata ----
    auto* gen = app.add_subcommand("gendata", "generate the synthetic toy dataset");
    std::string gen_out = "toy-data";
    uint64_t gen_seed = 0;
    int gen_count = 128, gen_size = 64, gen_classes = 4;
    gen->set_config("--config");
    gen->add_option("--out", gen_out, "output dataset directory")->capture_default_str();
    gen->add_option("--seed", gen_seed, "generation seed")->capture_default_str();
    gen->add_option("--count", gen_count, "number of samples")->capture_default_str();
    gen->add_option("--size", gen_size, "square image extent")->capture_default_str();
    gen->add_option("--classes", gen_classes, "number of classes (2..8)")->capture_default_str();

    // ---- train ----
    auto* tr = app.add_subcommand("train", "train on a dataset directory");
    std::string tr_data = "toy-data", tr_eval_data, tr_out = "dfanet.ckpt",
                tr_metrics = "metrics.csv", tr_variant = "B", tr_crop = "64x64";
    int tr_backbones = 2, tr_batch = 8;
    int64_t tr_classes = 4, tr_iters = 500, tr_eval_every = 100;
    double tr_lr = 0.2, tr_momentum = 0.9, tr_wd = 1e-5, tr_power = 0.9;
    uint64_t tr_seed = 0;
    bool tr_no_augment = false;
    tr->set_config("--config");
    tr->add_option("--data", tr_data, "training dataset directory")->capture_default_str();
    tr->add_option("--eval-data", tr_eval_data, "held-out dataset directory (defaults to --data)")
        ->capture_default_str();
    tr->add_option("--out", tr_out, "checkpoint output path")->capture_default_str();
    tr->add_option("--metrics", tr_metrics, "metrics CSV output path")->capture_default_str();
    tr->add_option("--variant", tr_variant, "backbone variant (A|B)")->capture_default_str();
    tr->add_option("--backbones", tr_backbones, "number of stacked backbones")
        ->capture_default_str();
    tr->add_option("--classes", tr_classes, "number of classes")->capture_default_str();
    tr->add_option("--batch", tr_batch, "batch size")->capture_default_str();
    tr->add_option("--iters", tr_iters, "training iterations")->capture_default_str();
    tr->add_option("--lr", tr_lr, "base learning rate")->capture_default_str();
    tr->add_option("--momentum", tr_momentum, "SGD momentum")->capture_default_str();
    tr->add_option("--wd", tr_wd, "weight decay")->capture_default_str();
    tr->add_option("--power", tr_power, "poly schedule power")->capture_default_str();
    tr->add_option("--crop", tr_crop, "training crop HxW")->capture_default_str();
    tr->add_option("--seed", tr_seed, "training seed")->capture_default_str();
    tr->add_option("--eval-every", tr_eval_every, "mIoU evaluation cadence")->capture_default_str();
    tr->add_flag("--no-augment", tr_no_augment, "disable flip/scale/crop augmentation");

    // ---- infer ----
    auto* in = app.add_subcommand("infer", "segment one PPM image");
    std::string in_ckpt = "dfanet.ckpt", in_image, in_out = "mask.ppm";
    in->set_config("--config");
    in->add_option("--checkpoint", in_ckpt, "checkpoint path")->capture_default_str();
    in->add_option("--image", in_image, "input PPM (P6)")->required();
    in->add_option("--out", in_out, "output palette mask PPM")->capture_default_str();

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string ev_ckpt = "dfanet.ckpt", ev_data = "toy-data";
    ev->set_config("--config");
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint path")->capture_default_str();
    ev->add_option("--data", ev_data, "dataset directory")->capture_default_str();

    // ---- bench ----
    auto* be = app.add_subcommand("bench", "eval-mode latency benchmark");
    std::string be_variant = "A", be_input = "1024x1024";
    int be_backbones = 3, be_iters = 30, be_warmup = 5;
    int64_t be_classes = 19;
    uint64_t be_seed = 0;
    be->set_config("--config");
    be->add_option("--variant", be_variant, "backbone variant (A|B)")->capture_default_str();
    be->add_option("--backbones", be_backbones, "number of stacked backbones")
        ->capture_default_str();
    be->add_option("--input", be_input, "input geometry HxW")->capture_default_str();
    be->add_option("--classes", be_classes, "number of classes")->capture_default_str();
    be->add_option("--iters", be_iters, "timed iterations")->capture_default_str();
    be->add_option("--warmup", be_warmup, "untimed warmup iterations")->capture_default_str();
    be->add_option("--seed", be_seed, "weight/input seed")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);  // prints help or the parse diagnostic
        return rc == 0 ? 0 : kExitUsage;
    }
    runtime::set_num_threads(threads);

    if (sum->parsed()) {
        print_resolved_config(sum);
        const auto [h, w] = parse_geometry(sum_input);
        ModelSpec spec;
        spec.variant = parse_variant(sum_variant);
        spec.num_backbones = sum_backbones;
        spec.num_classes = sum_classes;
        CostReport report =
            sum_backbone_only
                ? analyze_backbone_stack(spec.variant, spec.num_backbones, {1, 3, h, w})
                : analyze_spec(build_dfanet(spec), {1, 3, h, w});
        std::cout << emit_report(report,
                                 sum_format == "csv" ? ReportFormat::Csv : ReportFormat::Table);
        return 0;
    }

    if (gen->parsed()) {
        print_resolved_config(gen);
        auto samples = generate_toy_dataset(gen_seed, gen_count, gen_size, gen_classes);
        write_dataset(gen_out, samples);
        std::cout << "wrote " << samples.size() << " samples to " << gen_out << "\n";
        return 0;
    }

    if (tr->parsed()) {
        print_resolved_config(tr);
        auto data = load_dataset(tr_data);
        auto eval_set = tr_eval_data.empty() ? data : load_dataset(tr_eval_data);

        ModelSpec spec;
        spec.variant = parse_variant(tr_variant);
        spec.num_backbones = tr_backbones;
        spec.num_classes = tr_classes;
        DfaNet model(build_dfanet(spec), tr_seed);

        TrainConfig cfg;
        cfg.batch_size = tr_batch;
        cfg.momentum = tr_momentum;
        cfg.weight_decay = tr_wd;
        cfg.base_lr = tr_lr;
        cfg.power = tr_power;
        cfg.max_iter = tr_iters;
        std::tie(cfg.crop_h, cfg.crop_w) = parse_geometry(tr_crop);
        cfg.seed = tr_seed;
        cfg.eval_every = tr_eval_every;
        cfg.augment_enabled = !tr_no_augment;

        TrainResult result = train_loop(model, data, eval_set, cfg);
        {
            std::ofstream os(tr_metrics);
            if (!os) throw IoError("cannot open '" + tr_metrics + "' for writing");
            os << metrics_to_csv(result.log);
        }
        save_checkpoint(model, tr_out, mean_to_config(cfg.aug.mean));
        double final_miou = result.log.empty() || !result.log.back().miou
                                ? evaluate(model, eval_set, cfg.aug.mean).miou
                                : *result.log.back().miou;
        std::cout << "final mIoU " << final_miou << ", checkpoint " << tr_out << ", metrics "
                  << tr_metrics << "\n";
        return 0;
    }

    if (in->parsed()) {
        print_resolved_config(in);
        LoadedCheckpoint ckpt = load_checkpoint(in_ckpt);
        Tensor image = load_image_ppm(in_image);
        LabelMap mask = predict(*ckpt.model, image, mean_from_config(ckpt.config));
        save_mask_ppm(mask, in_out);
        std::cout << "wrote " << in_out << " (" << mask.w << "x" << mask.h << ")\n";
        return 0;
    }

    if (ev->parsed()) {
        print_resolved_config(ev);
        LoadedCheckpoint ckpt = load_checkpoint(ev_ckpt);
        auto data = load_dataset(ev_data);
        IoUResult r = evaluate(*ckpt.model, data, mean_from_config(ckpt.config));
        for (size_t k = 0; k < r.per_class.size(); ++k)
            std::cout << "class " << k << " IoU "
                      << (std::isnan(r.per_class[k]) ? std::string("n/a")
                                                     : std::to_string(r.per_class[k]))
                      << "\n";
        if (r.defined)
            std::cout << "mIoU " << r.miou << "\n";
        else
            std::cout << "mIoU undefined (no labeled pixels)\n";
        return 0;
    }

    if (be->parsed()) {
        print_resolved_config(be);
        const auto [h, w] = parse_geometry(be_input);
        ModelSpec spec;
        spec.variant = parse_variant(be_variant);
        spec.num_backbones = be_backbones;
        spec.num_classes = be_classes;
        BenchStats stats = run_bench(build_dfanet(spec), h, w, be_iters, be_warmup, be_seed);
        std::cout << "mean_ms " << stats.mean_ms << "\nmedian_ms " << stats.median_ms
                  << "\np95_ms " << stats.p95_ms << "\nfps " << stats.fps << "\n";
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
}
