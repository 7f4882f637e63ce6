#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "arithlens/analysis.hpp"
#include "arithlens/checkpoint.hpp"
#include "arithlens/exprgen.hpp"
#include "arithlens/geometry.hpp"
#include "arithlens/interventions.hpp"
#include "arithlens/model.hpp"
#include "arithlens/train.hpp"
#include "arithlens/vocab.hpp"

#ifndef ARITHLENS_VERSION
#define ARITHLENS_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace arithlens;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kDataError = 2, kNumericError = 3 };

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Options {
    std::uint64_t seed = 7;
    bool seed_given = false;
    std::string config;
    std::string out = ".";
    std::string ckpt;
    std::string data;
    std::string prompt;
    int layer = -1;
    int topk = 10;
    std::string filter = std::string(filter_name(kDefaultFilter));
    bool table = false;
    std::string point;
    std::string position = "equals";
    std::string target = "swapped-precedence";
    std::string site = "block_input";
};

std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hex(std::uint64_t v) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << v;
    return s.str();
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read '" + path + "'");
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Collects the outputs of one command and writes its manifest last.
class Run {
public:
    Run(std::string subcommand, std::string command_line, const Options& opt, fs::path manifest)
        : subcommand_(std::move(subcommand)), command_(std::move(command_line)), opt_(opt), manifest_(std::move(manifest)) {}

    static Run in_directory(const std::string& subcommand, const std::string& command_line, const Options& opt) {
        fs::create_directories(opt.out);
        return Run(subcommand, command_line, opt, fs::path(opt.out) / (subcommand + ".manifest.json"));
    }

    std::string manifest_name() const { return manifest_.filename().string(); }

    template <typename Fn>
    void csv(const std::string& name, Fn&& body) {
        const fs::path path = fs::path(opt_.out) / name;
        std::ofstream out(path);
        if (!out) throw DataError("cannot write '" + path.string() + "'");
        out << "# manifest: " << manifest_name() << '\n';
        body(out);
        outputs_.push_back(path.string());
    }

    void output(const std::string& path) { outputs_.push_back(path); }
    json& inputs() { return inputs_; }
    json& results() { return results_; }

    void finish() const {
        json m;
        m["command"] = command_;
        m["subcommand"] = subcommand_;
        m["config_hash"] = hex(config_hash());
        m["seed"] = opt_.seed;
        m["code_version"] = ARITHLENS_VERSION;
        m["timestamp"] = utc_timestamp();
        m["inputs"] = inputs_;
        m["outputs"] = outputs_;
        m["results"] = results_;
        std::ofstream out(manifest_);
        if (!out) throw DataError("cannot write '" + manifest_.string() + "'");
        out << m.dump(2) << '\n';
    }

private:
    std::uint64_t config_hash() const {
        json c;
        c["subcommand"] = subcommand_;
        c["seed"] = opt_.seed;
        c["config"] = opt_.config.empty() ? std::string() : read_file(opt_.config);
        c["layer"] = opt_.layer;
        c["topk"] = opt_.topk;
        c["filter"] = opt_.filter;
        c["prompt"] = opt_.prompt;
        c["point"] = opt_.point;
        c["position"] = opt_.position;
        c["target"] = opt_.target;
        c["site"] = opt_.site;
        c["inputs"] = inputs_;
        return fnv1a(c.dump());
    }

    std::string subcommand_;
    std::string command_;
    const Options& opt_;
    fs::path manifest_;
    json inputs_ = json::object();
    json results_ = json::object();
    std::vector<std::string> outputs_;
};

FilterPolicy parse_filter(const std::string& name) {
    const auto f = filter_from_name(name);
    if (!f) throw CLI::ValidationError("--filter", "unknown filter '" + name + "'");
    return *f;
}

std::vector<Expression> load_data(const Options& opt, Run& run) {
    std::vector<Expression> data = opt.data.empty() ? enumerate_default_dataset(parse_filter(opt.filter))
                                                    : read_dataset(opt.data);
    run.inputs()["data"] = opt.data.empty() ? "generated:" + opt.filter : opt.data;
    run.inputs()["data_hash"] = hex(dataset_hash(data));
    return data;
}

ModelBundle load_model(const Options& opt, Run& run) {
    if (opt.ckpt.empty()) throw DataError("missing checkpoint: pass --ckpt <file>");
    if (!fs::exists(opt.ckpt)) throw DataError("missing checkpoint '" + opt.ckpt + "'");
    run.inputs()["ckpt"] = opt.ckpt;
    run.inputs()["ckpt_hash"] = hex(fnv1a(read_file(opt.ckpt)));
    return load_checkpoint(opt.ckpt);
}

CapturePoint parse_point(const std::string& name) {
    for (auto p : kAllCapturePoints) {
        if (capture_point_name(p) == name) return p;
    }
    throw CLI::ValidationError("--point", "unknown capture point '" + name + "'");
}

int checked_layer(const ModelBundle& model, int layer) {
    if (layer < 0 || layer >= model.config().n_layers) throw CLI::ValidationError("--layer", "layer out of range");
    return layer;
}

void cmd_gen(const Options& opt, const std::string& argv_line) {
    const FilterPolicy policy = parse_filter(opt.filter);
    const fs::path out = opt.out == "." ? fs::path("data.jsonl") : fs::path(opt.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    Options local = opt;
    local.out = out.has_parent_path() ? out.parent_path().string() : ".";
    Run run("gen", argv_line, local, fs::path(out.string() + ".manifest.json"));
    const auto data = enumerate_default_dataset(policy);
    write_dataset(out.string(), data);
    run.output(out.string());
    run.results()["count"] = data.size();
    run.results()["filter"] = opt.filter;
    std::cout << data.size() << " expressions (" << opt.filter << ") -> " << out.string() << '\n';
    if (opt.table) {
        std::cout << "filter,count\n";
        for (auto p : {FilterPolicy::PositiveWhole, FilterPolicy::NonNegativeWhole, FilterPolicy::Unfiltered}) {
            const auto n = enumerate_default_dataset(p).size();
            std::cout << filter_name(p) << ',' << n << '\n';
            run.results()["interpretations"][std::string(filter_name(p))] = n;
        }
    }
    run.finish();
}

void cmd_train(const Options& opt, const std::string& argv_line) {
    if (opt.ckpt.empty()) throw CLI::ValidationError("--ckpt", "train needs an output checkpoint path");
    Run run = Run::in_directory("train", argv_line, opt);
    TrainConfig config = opt.config.empty() ? TrainConfig{} : TrainConfig::from_file(opt.config);
    if (opt.seed_given) config.seed = opt.seed;
    const auto data = load_data(opt, run);
    run.inputs()["train_config"] = json::parse(config.to_json());
    std::vector<TrainMetric> trace;
    auto result = train(ModelBundle::initialized(ModelConfig{}), data, config, [&](const TrainMetric& m) {
        std::cout << "step " << m.step << " epoch " << m.epoch << " loss " << m.train_loss << " heldout "
                  << m.heldout_accuracy << " (" << m.seconds << " s)\n";
        std::cout.flush();
    });
    save_checkpoint(result.model, opt.ckpt);
    run.output(opt.ckpt);
    run.csv("train_trace.csv", [&](std::ostream& out) {
        out << "step,epoch,train_loss,heldout_accuracy,seconds\n";
        out.precision(17);
        for (const auto& m : result.trace) {
            out << m.step << ',' << m.epoch << ',' << m.train_loss << ',' << m.heldout_accuracy << ',' << m.seconds
                << '\n';
        }
    });
    run.results()["heldout_accuracy"] = result.model.meta.heldout_accuracy;
    run.finish();
}

void cmd_eval(const Options& opt, const std::string& argv_line) {
    Run run = Run::in_directory("eval", argv_line, opt);
    const auto model = load_model(opt, run);
    const auto data = load_data(opt, run);
    const auto predictions = predict_answers(model, data);
    std::vector<Expression> correct;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (predictions[i] == data[i].final_value) correct.push_back(data[i]);
    }
    const double accuracy = data.empty() ? 0.0 : static_cast<double>(correct.size()) / static_cast<double>(data.size());
    run.csv("eval.csv", [&](std::ostream& out) {
        out << "prompts,correct,accuracy\n" << data.size() << ',' << correct.size() << ',' << accuracy << '\n';
    });
    run.csv("predictions.csv", [&](std::ostream& out) {
        out << "text,expected,predicted\n";
        for (std::size_t i = 0; i < data.size(); ++i) {
            out << data[i].text << ',' << data[i].final_value << ',' << vocab::lexeme(predictions[i]) << '\n';
        }
    });
    const fs::path subset = fs::path(opt.out) / "correct.jsonl";
    write_dataset(subset.string(), correct);
    run.output(subset.string());
    run.results()["accuracy"] = accuracy;
    run.results()["correct"] = correct.size();
    std::cout << correct.size() << " / " << data.size() << " correct (" << accuracy << ")\n";
    run.finish();
}

void cmd_lens(const Options& opt, const std::string& argv_line) {
    Run run = Run::in_directory("lens", argv_line, opt);
    const auto model = load_model(opt, run);
    if (opt.topk < 1) throw CLI::ValidationError("--topk", "must be positive");
    if (!opt.prompt.empty()) {
        const Expression e = expression_from_text(opt.prompt);
        const auto report = logit_lens(capture(model, e.text), model, opt.topk);
        const auto det = detect_intermediate(report, e);
        std::optional<Component> attribution;
        if (det.first_layer_top1) attribution = attribute_component(model, e, *det.first_layer_top1);
        run.csv("lens.csv", [&](std::ostream& out) { write_lens_csv(out, report); });
        run.csv("lens_summary.csv", [&](std::ostream& out) {
            out << "prompt,intermediate,final,predicted,first_layer_top1,attribution,degenerate,detected\n";
            out << e.text << ',' << e.intermediate << ',' << e.final_value << ','
                << vocab::lexeme(report.at(report.n_layers - 1, CapturePoint::PostMlp).top.front().token) << ',';
            if (det.first_layer_top1) out << *det.first_layer_top1;
            out << ',' << (attribution ? component_name(*attribution) : "") << ',' << det.degenerate << ','
                << det.any() << '\n';
        });
        run.inputs()["prompt"] = e.text;
        std::cout << "intermediate " << e.intermediate << (det.any() ? " detected" : " not detected");
        if (det.first_layer_top1) std::cout << ", top-1 from layer " << *det.first_layer_top1;
        if (attribution) std::cout << " (" << component_name(*attribution) << ")";
        std::cout << '\n';
    } else {
        const auto data = load_data(opt, run);
        const auto correct = correct_subset(model, data);
        const auto curve = detection_curve(model, correct, opt.topk);
        run.csv("detection_curve.csv", [&](std::ostream& out) { write_detection_csv(out, curve); });
        run.csv("attribution.csv", [&](std::ostream& out) {
            out << "component,count\nattention," << curve.attention << "\nmlp," << curve.mlp << "\nneither,"
                << curve.neither << '\n';
        });
        run.results()["prompts"] = curve.prompts;
        run.results()["detected"] = curve.detected;
        std::cout << curve.detected << " / " << curve.prompts << " correct prompts show the intermediate in the top-"
                  << opt.topk << '\n';
    }
    run.finish();
}

void cmd_probe_linear(const Options& opt, const std::string& argv_line) {
    Run run = Run::in_directory("probe-linear", argv_line, opt);
    const auto model = load_model(opt, run);
    const auto correct = correct_subset(model, load_data(opt, run));
    const CapturePoint point = opt.point.empty() ? CapturePoint::PostMlp : parse_point(opt.point);
    const PositionSelector selector = position_selector_from_name(opt.position);
    std::vector<int> layers;
    if (opt.layer >= 0) {
        layers.push_back(checked_layer(model, opt.layer));
    } else {
        for (int l = 0; l < model.config().n_layers; ++l) layers.push_back(l);
    }
    std::vector<double> y;
    for (const auto& e : correct) y.push_back(static_cast<double>(e.intermediate));
    std::vector<ProbeReport> reports;
    for (int l : layers) {
        const Matrix x = collect_activations(model, correct, {l, point},
                                             [&](const Expression& e) { return std::vector<int>{select_position(e, selector)}; });
        ProbeOptions po;
        po.seed = opt.seed;
        auto r = fit_linear_probe(x.cref(), y, po);
        r.layer = l;
        r.point = point;
        r.position = std::string(position_selector_name(selector));
        std::cout << "layer " << l << " R^2 " << r.metric << '\n';
        reports.push_back(r);
    }
    run.csv("probe_linear.csv", [&](std::ostream& out) {
        write_probe_csv_header(out);
        for (const auto& r : reports) write_probe_csv_row(out, r);
    });
    run.finish();
}

void cmd_probe_logistic(const Options& opt, const std::string& argv_line) {
    Run run = Run::in_directory("probe-logistic", argv_line, opt);
    const auto model = load_model(opt, run);
    const auto correct = correct_subset(model, load_data(opt, run));
    const int layer = checked_layer(model, opt.layer < 0 ? 0 : opt.layer);
    std::vector<CapturePoint> points{CapturePoint::BlockInput, CapturePoint::PostAttention};
    if (!opt.point.empty()) points = {parse_point(opt.point)};
    const auto y = precedence_labels(correct);
    ProbeOptions po;
    po.seed = opt.seed;
    std::vector<ProbeReport> reports;
    for (CapturePoint point : points) {
        const Matrix x = collect_activations(model, correct, {layer, point}, operator_positions_of);
        auto r = fit_logistic_probe(x.cref(), y, po);
        r.layer = layer;
        r.point = point;
        r.position = "operators";
        reports.push_back(r);
        auto shuffled = y;
        std::mt19937_64 rng(opt.seed);
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        auto control = fit_logistic_probe(x.cref(), shuffled, po);
        control.layer = layer;
        control.point = point;
        control.position = "operators-shuffled-labels";
        reports.push_back(control);
        std::cout << capture_point_name(point) << " accuracy " << r.metric << " (shuffled " << control.metric << ")\n";
    }
    run.csv("probe_logistic.csv", [&](std::ostream& out) {
        write_probe_csv_header(out);
        for (const auto& r : reports) write_probe_csv_row(out, r);
    });
    run.finish();
}

void cmd_ablate(const Options& opt, const std::string& argv_line) {
    Run run = Run::in_directory("ablate", argv_line, opt);
    const auto model = load_model(opt, run);
    const auto correct = correct_subset(model, load_data(opt, run));
    const auto report = ablate_attention_sweep(model, correct, opt.topk);
    run.csv("ablation.csv", [&](std::ostream& out) { write_ablation_csv(out, report); });
    for (std::size_t l = 0; l < report.accuracy.size(); ++l) {
        std::cout << "layer " << l << " accuracy " << report.accuracy[l] << " detections " << report.detections[l]
                  << '\n';
    }
    run.results()["prompts"] = report.prompts;
    run.finish();
}

void cmd_swap(const Options& opt, const std::string& argv_line) {
    if (opt.prompt.empty()) throw CLI::ValidationError("--prompt", "swap needs a prompt");
    Run run = Run::in_directory("swap", argv_line, opt);
    const auto model = load_model(opt, run);
    const Expression e = expression_from_text(opt.prompt);
    TargetKind kind = TargetKind::SwappedPrecedence;
    if (opt.target == target_kind_name(TargetKind::ExchangedPrompt)) {
        kind = TargetKind::ExchangedPrompt;
    } else if (opt.target != target_kind_name(TargetKind::SwappedPrecedence)) {
        throw CLI::ValidationError("--target", "unknown target '" + opt.target + "'");
    }
    SwapSite site = SwapSite::BlockInput;
    if (opt.site == "post_attention") {
        site = SwapSite::PostAttention;
    } else if (opt.site != "block_input") {
        throw CLI::ValidationError("--site", "unknown swap site '" + opt.site + "'");
    }
    const auto exp = make_swap_experiment(e, kind, site);
    const auto ranking = dim_contributions(model, exp);
    const auto patch = cumulative_patch(model, exp, ranking);
    run.csv("contributions.csv", [&](std::ostream& out) { write_contributions_csv(out, ranking); });
    run.csv("patch_trace.csv", [&](std::ostream& out) { write_patch_csv(out, patch); });
    run.inputs()["prompt"] = e.text;
    run.results()["t_target"] = std::string(vocab::lexeme(exp.t_target));
    run.results()["t_real"] = std::string(vocab::lexeme(exp.t_real));
    run.results()["minimal_k"] = patch.minimal_k ? json(*patch.minimal_k) : json(nullptr);
    std::cout << "target " << vocab::lexeme(exp.t_target) << ", real " << vocab::lexeme(exp.t_real) << ", minimal k ";
    if (patch.minimal_k) {
        std::cout << *patch.minimal_k << '\n';
    } else {
        std::cout << "none\n";
    }
    run.finish();
}

void cmd_project(const Options& opt, const std::string& argv_line) {
    Run run = Run::in_directory("project", argv_line, opt);
    const auto model = load_model(opt, run);
    const auto correct = correct_subset(model, load_data(opt, run));
    const int layer = checked_layer(model, opt.layer < 0 ? 0 : opt.layer);
    std::vector<CapturePoint> points{CapturePoint::BlockInput, CapturePoint::PostAttention};
    if (!opt.point.empty()) points = {parse_point(opt.point)};
    std::vector<std::pair<LabeledActivationSet, double>> scored;
    for (CapturePoint point : points) {
        auto set = operator_activation_set(model, correct, layer, point);
        const auto coords = project_2d(set);
        const double score = cluster_separation(set);
        run.csv("projection_" + std::string(capture_point_name(point)) + ".csv",
                [&](std::ostream& out) { write_projection_csv(out, coords); });
        std::cout << capture_point_name(point) << " silhouette " << score << '\n';
        scored.emplace_back(std::move(set), score);
    }
    run.csv("separation.csv", [&](std::ostream& out) {
        out << "layer,site,score,n_rows,n_labels\n";
        out.precision(17);
        for (const auto& [set, score] : scored) {
            std::vector<std::string> labels = set.labels;
            std::ranges::sort(labels);
            const auto n_labels = std::unique(labels.begin(), labels.end()) - labels.begin();
            out << set.layer << ',' << capture_point_name(set.point) << ',' << score << ',' << set.rows.rows() << ','
                << n_labels << '\n';
        }
    });
    run.finish();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Arithmetic interpretability lab on a toy transformer"};
    app.require_subcommand(1);
    Options opt;

    std::string argv_line;
    for (int i = 0; i < argc; ++i) argv_line += (i ? " " : "") + std::string(argv[i]);

    const auto seed = [&](CLI::App* s) {
        s->add_option_function<std::uint64_t>(
            "--seed", [&](std::uint64_t v) { opt.seed = v; opt.seed_given = true; }, "random seed");
    };
    const auto model_inputs = [&](CLI::App* s) {
        s->add_option("--ckpt", opt.ckpt, "model checkpoint");
        s->add_option("--data", opt.data, "dataset (JSONL); default: generated");
        s->add_option("--out", opt.out, "output directory");
        seed(s);
    };

    auto* gen = app.add_subcommand("gen", "enumerate the expression dataset");
    gen->add_option("--out", opt.out, "output JSONL file");
    gen->add_option("--filter", opt.filter, "non-negative-whole | positive-whole | unfiltered");
    gen->add_flag("--table", opt.table, "print counts for every filter interpretation");
    seed(gen);

    auto* tr = app.add_subcommand("train", "train the default model");
    model_inputs(tr);
    tr->add_option("--config", opt.config, "training config (JSON)");

    auto* ev = app.add_subcommand("eval", "answer accuracy and correct subset");
    model_inputs(ev);

    auto* lens = app.add_subcommand("lens", "logit lens for one prompt or a detection curve over the data");
    model_inputs(lens);
    lens->add_option("--prompt", opt.prompt, "canonical prompt, e.g. \"3 + 4 * 5 = \"");
    lens->add_option("--topk", opt.topk, "lens depth")->capture_default_str();

    auto* pl = app.add_subcommand("probe-linear", "linear probe for the intermediate value");
    model_inputs(pl);
    pl->add_option("--layer", opt.layer, "layer (default: all)");
    pl->add_option("--point", opt.point, "block_input | post_attention | post_mlp (default post_mlp)");
    pl->add_option("--position", opt.position, "equals | operator1 | operator2")->capture_default_str();

    auto* pg = app.add_subcommand("probe-logistic", "logistic probe for operator evaluation order");
    model_inputs(pg);
    pg->add_option("--layer", opt.layer, "layer (default 0)");
    pg->add_option("--point", opt.point, "capture point (default: block_input and post_attention)");

    auto* ab = app.add_subcommand("ablate", "per-layer attention ablation sweep");
    model_inputs(ab);
    ab->add_option("--topk", opt.topk, "lens depth for detection")->capture_default_str();

    auto* sw = app.add_subcommand("swap", "dimension contributions and cumulative patching");
    model_inputs(sw);
    sw->add_option("--prompt", opt.prompt, "prompt without parentheses")->required();
    sw->add_option("--target", opt.target, "swapped-precedence | exchanged-prompt")->capture_default_str();
    sw->add_option("--site", opt.site, "block_input | post_attention")->capture_default_str();

    auto* pr = app.add_subcommand("project", "2-D projection and silhouette of operator activations");
    model_inputs(pr);
    pr->add_option("--layer", opt.layer, "layer (default 0)");
    pr->add_option("--point", opt.point, "capture point (default: block_input and post_attention)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*gen) cmd_gen(opt, argv_line);
        if (*tr) cmd_train(opt, argv_line);
        if (*ev) cmd_eval(opt, argv_line);
        if (*lens) cmd_lens(opt, argv_line);
        if (*pl) cmd_probe_linear(opt, argv_line);
        if (*pg) cmd_probe_logistic(opt, argv_line);
        if (*ab) cmd_ablate(opt, argv_line);
        if (*sw) cmd_swap(opt, argv_line);
        if (*pr) cmd_project(opt, argv_line);
    } catch (const CLI::ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const DivergenceError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kNumericError;
    } catch (const std::domain_error& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kNumericError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kDataError;
    }
    return kOk;
}
