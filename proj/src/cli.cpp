#include "openseg/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "openseg/config.hpp"
#include "openseg/errors.hpp"
#include "openseg/image_io.hpp"

namespace openseg {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct GlobalOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> profile;
};

class RefuseOverwrite : public Error {
public:
    using Error::Error;
};

RunConfig resolve_config(const GlobalOptions& g) {
    RunConfig c = g.config.empty() ? RunConfig::from_json(json::object(), g.profile) : RunConfig::load(g.config, g.profile);
    if (g.seed) c.set_seed(*g.seed);
    return c;
}

bool nonempty_dir(const fs::path& p) { return fs::exists(p) && fs::is_directory(p) && !fs::is_empty(p); }

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// ---- generate -----------------------------------------------------------

int cmd_generate(const GlobalOptions& g, const std::string& out_arg, bool force, std::ostream& out) {
    auto cfg = g.config.empty() ? RunConfig::from_json(json::object(), g.profile) : RunConfig::load(g.config, g.profile);
    if (g.seed) cfg.data.scene.seed = *g.seed;
    const fs::path dir = out_arg.empty() ? fs::path(cfg.data.path) : fs::path(out_arg);
    if (nonempty_dir(dir)) {
        if (!force) throw RefuseOverwrite("'" + dir.string() + "' is not empty; pass --force to overwrite");
        fs::remove_all(dir);
    }
    auto report = generate_dataset(cfg.data.scene, cfg.data.n_images, dir, cfg.data.n_val);
    out << "images=" << report.images << "\n"
        << "instances=" << report.instances << "\n"
        << "skipped=" << report.skipped << "\n"
        << "train=" << report.train << "\n"
        << "val=" << report.val << "\n";
    for (const auto& [name, n] : report.per_class) out << "class." << name << "=" << n << "\n";
    return kExitOk;
}

// ---- train ----------------------------------------------------------------

struct LogRow {
    std::int64_t step;
    double loss, lr;
};

std::vector<LogRow> read_log(const fs::path& path) {
    std::vector<LogRow> rows;
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ss(line);
        LogRow r{};
        if (ss >> r.step >> r.loss >> r.lr) rows.push_back(r);
    }
    return rows;
}

void write_loss_plot(const fs::path& log, const fs::path& svg) {
    auto rows = read_log(log);
    if (rows.empty()) return;
    double lo = rows[0].loss, hi = rows[0].loss;
    for (const auto& r : rows) {
        lo = std::min(lo, r.loss);
        hi = std::max(hi, r.loss);
    }
    if (hi <= lo) hi = lo + 1.0;
    const double w = 640, h = 360, pad = 40;
    const double x_max = std::max<double>(1.0, static_cast<double>(rows.back().step));
    std::ofstream f(svg);
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<line x1=\"" << pad << "\" y1=\"" << h - pad << "\" x2=\"" << w - pad << "\" y2=\"" << h - pad << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad << "\" y2=\"" << h - pad << "\" stroke=\"black\"/>\n"
      << "<text x=\"" << pad << "\" y=\"" << pad - 10 << "\" font-size=\"12\">loss " << hi << "</text>\n"
      << "<text x=\"" << pad << "\" y=\"" << h - 10 << "\" font-size=\"12\">" << lo << " (step " << rows.back().step << ")</text>\n"
      << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1\" points=\"";
    for (const auto& r : rows) {
        const double x = pad + (w - 2 * pad) * static_cast<double>(r.step) / x_max;
        const double y = h - pad - (h - 2 * pad) * (r.loss - lo) / (hi - lo);
        f << x << "," << y << " ";
    }
    f << "\"/>\n</svg>\n";
}

int cmd_train(const GlobalOptions& g, const std::string& data_arg, const std::string& out_arg, std::int64_t steps,
              const std::string& resume, bool force, bool plot, std::ostream& out, std::ostream& err) {
    RunConfig cfg;
    std::optional<CheckpointInfo> resumed;
    if (!resume.empty()) {
        resumed = read_checkpoint_info(resume);
        cfg = RunConfig::from_json(resumed->config);
        if (g.seed) cfg.set_seed(*g.seed);
    } else {
        cfg = resolve_config(g);
    }
    const fs::path data_dir = data_arg.empty() ? fs::path(cfg.data.path) : fs::path(data_arg);
    if (!fs::exists(data_dir / "annotations.json"))
        throw ConfigError("dataset not found at '" + data_dir.string() + "' (run `openseg generate` first)");
    const fs::path run_dir = out_arg.empty() ? fs::path(cfg.out_dir) : fs::path(out_arg);
    const auto log_path = run_dir / "loss.tsv";
    if (!resumed && fs::exists(log_path) && !force)
        throw RefuseOverwrite("'" + run_dir.string() + "' already holds a run; pass --force or --resume");
    fs::create_directories(run_dir);

    auto data = load_dataset(data_dir);
    if (data.vocab.names != cfg.data.scene.shape_classes)
        throw ConfigError("dataset classes do not match data.shape_classes of the config");
    auto model = std::make_shared<SegModel>(cfg.pool, cfg.model, cfg.torch_dtype(), cfg.seed);
    Trainer trainer(model, cfg.train, cfg.loss);
    trainer.set_dump_dir(run_dir);

    std::vector<LogRow> kept;
    if (resumed) {
        load_checkpoint(resume, trainer);
        for (const auto& r : read_log(log_path)) {
            if (r.step <= trainer.current_step()) kept.push_back(r);
        }
    }
    std::ofstream log(log_path, std::ios::trunc);
    for (const auto& r : kept) log << r.step << "\t" << fmt(r.loss) << "\t" << fmt(r.lr) << "\n";
    log.flush();

    const auto echo = cfg.to_json();
    try {
        trainer.fit(data, steps, [&](std::int64_t s, const StepResult& r) {
            log << s << "\t" << fmt(r.loss) << "\t" << fmt(r.lr) << "\n";
            log.flush();
            if (s % cfg.checkpoint_every == 0) save_checkpoint(run_dir / ("step_" + std::to_string(s) + ".ckpt"), trainer, echo);
        });
    } catch (const NumericalError& e) {
        err << "error: " << e.what() << "\n";
        if (!e.dump_path().empty()) err << "diagnostics: " << e.dump_path() << "\n";
        return kExitNumerical;
    }
    save_checkpoint(run_dir / "last.ckpt", trainer, echo);
    if (plot) write_loss_plot(log_path, run_dir / "loss.svg");
    out << "step=" << trainer.current_step() << "\n"
        << "checkpoint=" << (run_dir / "last.ckpt").string() << "\n"
        << "log=" << log_path.string() << "\n";
    return kExitOk;
}

// ---- eval / predict -------------------------------------------------------

struct LoadedModel {
    RunConfig cfg;
    std::unique_ptr<SegModel> model;
};

LoadedModel load_model(const GlobalOptions& g, const std::string& checkpoint) {
    auto info = read_checkpoint_info(checkpoint);
    LoadedModel m;
    m.cfg = RunConfig::from_json(info.config);
    if (!g.config.empty()) {
        // data and eval settings may come from a separate config; the model is the checkpoint's
        auto other = RunConfig::load(g.config, g.profile);
        m.cfg.data = other.data;
        m.cfg.eval = other.eval;
    }
    if (g.seed) m.cfg.set_seed(*g.seed);
    m.model = std::make_unique<SegModel>(m.cfg.pool, m.cfg.model, m.cfg.torch_dtype(), m.cfg.seed);
    load_model_weights(checkpoint, *m.model);
    return m;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

int cmd_eval(const GlobalOptions& g, const std::string& checkpoint, const std::string& tasks, const std::string& data_arg,
             const std::string& json_out, int max_images, std::ostream& out) {
    auto m = load_model(g, checkpoint);
    if (max_images >= 0) m.cfg.eval.max_images = max_images;
    std::vector<EvalTask> list;
    for (const auto& t : split_list(tasks)) list.push_back(eval_task_from_name(t));
    if (list.empty()) throw ConfigError("--task needs at least one of text|visual|fused|fewshot|vos");
    std::optional<Dataset> data;
    json results;
    for (auto task : list) {
        EvalResult r;
        if (task == EvalTask::Vos) {
            r = evaluate_vos(*m.model, m.cfg.data.scene, m.cfg.eval);
        } else {
            if (!data) {
                const fs::path dir = data_arg.empty() ? fs::path(m.cfg.data.path) : fs::path(data_arg);
                if (!fs::exists(dir / "annotations.json")) throw ConfigError("dataset not found at '" + dir.string() + "'");
                data = load_dataset(dir);
                if (data->vocab.names != m.cfg.data.scene.shape_classes)
                    throw ConfigError("dataset classes do not match the classes the checkpoint was trained on");
            }
            r = evaluate(*m.model, *data, task, m.cfg.eval);
        }
        out << "task=" << to_string(task) << "\n" << "images=" << r.images << "\n";
        if (task == EvalTask::Vos) {
            out << "vos_iou=" << r.vos_iou << "\n" << "max_bank=" << r.vos_max_bank << "\n"
                << "pinned_kept=" << (r.vos_pinned ? 1 : 0) << "\n";
            results[to_string(task)] = {{"vos_iou", r.vos_iou}, {"max_bank", r.vos_max_bank}};
        } else {
            out << r.report.to_text(data->vocab.names);
            results[to_string(task)] = json::parse(r.report.to_json());
        }
        out << "\n";
    }
    if (!json_out.empty()) std::ofstream(json_out) << results.dump(2) << "\n";
    return kExitOk;
}

Tensor read_mask(const std::string& path) {
    if (!fs::exists(path)) throw ConfigError("mask file '" + path + "' not found");
    return (read_png(path)[0] > 127).to(torch::kUInt8);
}

int cmd_predict(const GlobalOptions& g, const std::string& checkpoint, const std::string& image_path,
                const std::vector<std::string>& text, const std::string& example, const std::vector<std::string>& masks,
                const std::vector<std::string>& classes, const std::string& out_dir, bool semantic, bool panoptic,
                std::ostream& out) {
    if (text.empty() && example.empty()) throw ConfigError("predict needs --text and/or --example");
    if (!example.empty() && (masks.empty() || masks.size() != classes.size()))
        throw ConfigError("--example needs one --mask and one --class per exemplar instance");
    if (!fs::exists(image_path)) throw ConfigError("image '" + image_path + "' not found");
    auto m = load_model(g, checkpoint);
    ClassVocabulary vocab(m.cfg.data.scene.shape_classes);
    auto image = to_float_image(read_png(image_path));

    PromptBundle bundle;
    if (!text.empty()) {
        std::vector<int> ids;
        for (const auto& t : text) {
            for (const auto& name : split_list(t)) ids.push_back(vocab.id_of(name));
        }
        bundle.text = m.model->pool().encode_text_prompts(ids, vocab);
    }
    if (!example.empty()) {
        if (!fs::exists(example)) throw ConfigError("example image '" + example + "' not found");
        auto ex_image = to_float_image(read_png(example));
        std::vector<Tensor> ms;
        std::vector<int> ids;
        for (std::size_t i = 0; i < masks.size(); ++i) {
            ms.push_back(read_mask(masks[i]));
            ids.push_back(vocab.id_of(classes[i]));
        }
        bundle.visual = m.model->pool().encode_visual_prompts(ex_image, ms, ids);
    }
    auto result = segment(*m.model, image, bundle, m.cfg.eval.thresholds, vocab.stuff_flags);
    const auto prefix = fs::path(image_path).stem().string();
    write_prediction(out_dir, prefix, result, vocab.names, semantic, panoptic);
    out << "mode=" << to_string(result.mode) << "\n"
        << "instances=" << result.instances.size() << "\n"
        << "sidecar=" << (fs::path(out_dir) / (prefix + ".json")).string() << "\n";
    return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"openseg: prompt-driven segmentation with a frozen encoder pool"};
    app.require_subcommand(1);
    GlobalOptions g;
    std::uint64_t seed = 0;
    std::string profile;
    app.add_option("--config", g.config, "run configuration (JSON)");
    auto* seed_opt = app.add_option("--seed", seed, "override the configured seed");
    auto* profile_opt = app.add_option("--profile", profile, "defaults profile")->check(CLI::IsMember({"paper", "desk"}));

    std::string out_arg, data_arg, resume, checkpoint, tasks, json_out, image, example, pred_out = "prediction";
    std::vector<std::string> text, masks, classes;
    std::int64_t steps = -1;
    int max_images = -1;
    bool force = false, plot = false, semantic = false, panoptic = false;

    auto* gen = app.add_subcommand("generate", "write the synthetic dataset")->fallthrough();
    gen->add_option("--out", out_arg, "output directory (default: data.path)");
    gen->add_flag("--force", force, "overwrite a non-empty output directory");

    auto* train = app.add_subcommand("train", "train the decoder")->fallthrough();
    train->add_option("--data", data_arg, "dataset directory (default: data.path)");
    train->add_option("--out", out_arg, "run directory (default: train.out_dir)");
    train->add_option("--steps", steps, "stop after this many steps of the schedule");
    train->add_option("--resume", resume, "continue from a checkpoint");
    train->add_flag("--force", force, "overwrite an existing run directory");
    train->add_flag("--plot", plot, "write loss.svg");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the validation split")->fallthrough();
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    eval->add_option("--task", tasks, "comma list of text|visual|fused|fewshot|vos")->required();
    eval->add_option("--data", data_arg, "dataset directory (default: data.path)");
    eval->add_option("--json", json_out, "also write results as JSON");
    eval->add_option("--max-images", max_images, "evaluate only the first n validation images");

    auto* pred = app.add_subcommand("predict", "segment one image")->fallthrough();
    pred->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    pred->add_option("--image", image, "input PNG")->required();
    pred->add_option("--text", text, "class names to prompt");
    pred->add_option("--example", example, "exemplar PNG");
    pred->add_option("--mask", masks, "exemplar instance mask PNG (repeatable)");
    pred->add_option("--class", classes, "class of each exemplar mask (repeatable)");
    pred->add_option("--out", pred_out, "output directory");
    pred->add_flag("--semantic", semantic, "also write the merged semantic map");
    pred->add_flag("--panoptic", panoptic, "also write the panoptic map");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }
    if (seed_opt->count()) g.seed = seed;
    if (profile_opt->count()) g.profile = profile;

    try {
        if (gen->parsed()) return cmd_generate(g, out_arg, force, out);
        if (train->parsed()) return cmd_train(g, data_arg, out_arg, steps, resume, force, plot, out, err);
        if (eval->parsed()) return cmd_eval(g, checkpoint, tasks, data_arg, json_out, max_images, out);
        if (pred->parsed()) return cmd_predict(g, checkpoint, image, text, example, masks, classes, pred_out, semantic, panoptic, out);
    } catch (const RefuseOverwrite& e) {
        err << "error: " << e.what() << "\n";
        return kExitRefuse;
    } catch (const NumericalError& e) {
        err << "error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const ModelStateError& e) {
        err << "error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}

}  // namespace openseg
