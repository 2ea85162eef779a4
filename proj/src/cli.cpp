#include "mrad/cli.hpp"

#include "mrad/error.hpp"
#include "mrad/eval_metrics.hpp"
#include "mrad/io.hpp"
#include "mrad/membank.hpp"
#include "mrad/metric_ft.hpp"
#include "mrad/retrieval.hpp"
#include "mrad/scoring.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

namespace mrad::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json optional_number(const std::optional<double>& v)
{
    return v ? json(*v) : json(nullptr);
}

void write_json(const fs::path& path, const json& j)
{
    io::write_file(path, j.dump(2) + "\n");
}

void check_unique_ids(const std::vector<ImageRecord>& records)
{
    std::set<std::string> seen;
    for (const auto& r : records)
        if (!seen.insert(r.id).second)
            throw_validation("duplicate id '" + r.id + "' in feature pack");
}

std::string map_file_name(std::size_t index, const std::string& id)
{
    std::string safe;
    for (char c : id)
        safe += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_';
    std::ostringstream name;
    name << std::setw(6) << std::setfill('0') << index << '_' << safe.substr(0, 120);
    return name.str();
}

// Blue -> cyan -> yellow -> red ramp.
std::array<std::uint8_t, 3> heat_color(float v)
{
    const double t = std::clamp(static_cast<double>(v), 0.0, 1.0);
    const auto ch = [](double x) { return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(x, 0.0, 1.0))); };
    return {ch(1.5 - std::abs(4.0 * t - 3.0)), ch(1.5 - std::abs(4.0 * t - 2.0)), ch(1.5 - std::abs(4.0 * t - 1.0))};
}

void render_png(const AnomalyMap& map, const fs::path& path)
{
    std::vector<std::uint8_t> rgb(map.scores.size() * 3);
    for (std::size_t i = 0; i < map.scores.size(); ++i) {
        const auto c = heat_color(map.scores[i]);
        std::copy(c.begin(), c.end(), rgb.begin() + static_cast<std::ptrdiff_t>(3 * i));
    }
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = map.width;
    image.height = map.height;
    image.format = PNG_FORMAT_RGB;
    fs::path tmp = path;
    tmp += ".tmp";
    if (!png_image_write_to_file(&image, tmp.c_str(), 0, rgb.data(), 0, nullptr))
        throw_io("cannot write " + path.string() + ": " + image.message);
    fs::rename(tmp, path);
}

RetrievalParams params_with(double tau, double topk, double rho_cls, double rho_seg)
{
    RetrievalParams p;
    p.tau = tau;
    p.topk_fraction = topk;
    p.rho_cls = rho_cls;
    p.rho_seg = rho_seg;
    p.validate();
    return p;
}

void check_dims(const MemoryBank& bank, const io::FeaturePack& pack, const MetricWeights* weights)
{
    if (bank.d != pack.d)
        throw_validation("bank is " + std::to_string(bank.d) + "-dimensional but pack features are "
                         + std::to_string(pack.d) + "-dimensional");
    if (weights && weights->dim() != bank.d)
        throw_validation("weights are " + std::to_string(weights->dim()) + "-dimensional but bank is "
                         + std::to_string(bank.d) + "-dimensional");
}

// ---------------------------------------------------------------- commands

struct BuildArgs {
    std::string features, out, tag;
    bool log = false;
};

void build_memory(const BuildArgs& a, std::ostream& out, std::ostream& err)
{
    const io::FeaturePack pack = io::read_feature_pack(a.features);
    if (pack.records.empty())
        throw_validation("empty pack: " + a.features);
    check_unique_ids(pack.records);
    const std::string tag = a.tag.empty() ? fs::path(a.features).stem().string() : a.tag;
    const membank::BuildResult built = membank::build_bank(pack.records, pack.grid, tag);
    if (built.warning)
        err << "warning: " << *built.warning << "\n";
    if (a.log)
        for (const auto& r : pack.records) {
            const auto labels = membank::patch_labels(r, pack.grid);
            const auto anomalous = labels ? std::count(labels->begin(), labels->end(), 1) : 0;
            err << r.id << " label=" << int(r.label) << " mask=" << (r.mask ? "yes" : "no")
                << " anomalous_patches=" << (labels ? std::to_string(anomalous) : "n/a") << "\n";
        }
    io::save_bank(built.bank, a.out);
    out << "N_c=" << built.bank.image_entries() << " N_p=" << built.bank.patch_entries() << "\n";
}

struct ScoreArgs {
    std::string bank, features, out, weights;
    double tau = 1.0;
    double topk = 0.01;
    double smooth_sigma = 0.0;
    bool pixel_only = false;
    bool render_png = false;
};

void score(const ScoreArgs& a, std::ostream& out)
{
    const MemoryBank bank = io::load_bank(a.bank);
    const io::FeaturePack pack = io::read_feature_pack(a.features);
    check_unique_ids(pack.records);
    std::optional<MetricWeights> weights;
    if (!a.weights.empty())
        weights = io::load_weights(a.weights);
    check_dims(bank, pack, weights ? &*weights : nullptr);
    const RetrievalParams params = params_with(a.tau, a.topk, 0.05, 0.20);

    std::error_code ec;
    fs::create_directories(a.out, ec);
    if (ec)
        throw_io("cannot create output directory " + a.out + ": " + ec.message());

    const retrieval::Retriever retriever = weights ? retrieval::Retriever(bank, params, *weights)
                                                   : retrieval::Retriever(bank, params);
    std::string lines;
    for (std::size_t i = 0; i < pack.records.size(); ++i) {
        const ImageRecord& r = pack.records[i];
        const retrieval::RetrievalOutput y = retriever.retrieve(r);
        AnomalyMap map = scoring::upsample_map(y.seg_anomaly(), pack.grid.grid_h, pack.grid.grid_w,
                                               pack.grid.image_h, pack.grid.image_w);
        map = scoring::smooth_map(map, a.smooth_sigma);
        const double s = a.pixel_only ? scoring::image_score_pixel_only(map, params)
                                      : scoring::image_score(y.y_cls, map, params);
        const std::string stem = map_file_name(i, r.id);
        io::save_map(map, fs::path(a.out) / (stem + ".amap"));
        if (a.render_png)
            render_png(map, fs::path(a.out) / (stem + ".png"));
        const json row = {{"schema_version", kSchemaVersion},
                          {"id", r.id},
                          {"score", s},
                          {"y_cls", {y.y_cls[0], y.y_cls[1]}},
                          {"map_file", stem + ".amap"}};
        lines += row.dump() + "\n";
    }
    io::write_file(fs::path(a.out) / "scores.jsonl", lines);
    out << "scored " << pack.records.size() << " images (" << (weights ? "fine-tuned" : "train-free") << ")\n";
}

struct TrainArgs {
    std::string bank, features, out, log;
    double lr = 5e-4;
    std::size_t batch = 8;
    std::size_t epochs = 1;
    double rho_seg = 0.20;
    double rho_cls = 0.05;
    double tau = 1.0;
    std::uint64_t seed = 0;
};

void train(const TrainArgs& a, std::ostream& out)
{
    const MemoryBank bank = io::load_bank(a.bank);
    const io::FeaturePack pack = io::read_feature_pack(a.features);
    if (pack.records.empty())
        throw_validation("empty pack: " + a.features);
    check_unique_ids(pack.records);
    check_dims(bank, pack, nullptr);
    const RetrievalParams params = params_with(a.tau, 0.01, a.rho_cls, a.rho_seg);
    ft::TrainConfig config;
    config.learning_rate = a.lr;
    config.batch_size = a.batch;
    config.epochs = a.epochs;
    config.seed = a.seed;

    std::string log;
    const MetricWeights w = ft::train(pack.records, pack.grid, bank, config, params, [&](const ft::StepLog& s) {
        const json row = {{"schema_version", kSchemaVersion},
                          {"step", s.step},
                          {"epoch", s.epoch},
                          {"batch_images", s.batch_images},
                          {"loss", {{"bce", s.loss.bce}, {"dice", s.loss.dice}, {"focal", s.loss.focal},
                                    {"total", s.loss.total}}},
                          {"grad_norm", {{"wq_cls", s.grad_norm_wq_cls}, {"wk_cls", s.grad_norm_wk_cls},
                                         {"wq_seg", s.grad_norm_wq_seg}, {"wk_seg", s.grad_norm_wk_seg}}}};
        log += row.dump() + "\n";
    });
    io::save_weights(w, a.out);
    io::write_file(a.log.empty() ? a.out + ".log.jsonl" : a.log, log);
    out << "trained " << std::count(log.begin(), log.end(), '\n') << " steps\n";
}

struct EvalArgs {
    std::string scores, features, out, categories, csv;
};

json metrics_json(const eval::CategoryMetrics& m)
{
    return {{"image_auroc", optional_number(m.image_auroc)},
            {"image_ap", optional_number(m.image_ap)},
            {"pixel_auroc", optional_number(m.pixel_auroc)},
            {"pro", optional_number(m.pro)},
            {"images", m.images},
            {"anomalous_images", m.anomalous_images},
            {"pixel_images", m.pixel_images}};
}

std::string pct_pair(const std::optional<double>& a, const std::optional<double>& b)
{
    const auto f = [](const std::optional<double>& v) {
        if (!v)
            return std::string("-");
        std::ostringstream s;
        s.setf(std::ios::fixed);
        s.precision(1);
        s << 100.0 * *v;
        return s.str();
    };
    return f(a) + " / " + f(b);
}

void evaluate(const EvalArgs& a, std::ostream& out, std::ostream& err)
{
    const io::FeaturePack pack = io::read_feature_pack(a.features);
    check_unique_ids(pack.records);

    struct ScoreRow {
        double score;
        std::string map_file;
    };
    std::map<std::string, ScoreRow> rows;
    const fs::path dir(a.scores);
    std::istringstream lines(io::read_file(dir / "scores.jsonl"));
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(lines, line)) {
        ++line_no;
        if (line.empty())
            continue;
        try {
            const json j = json::parse(line);
            const std::string id = j.at("id").get<std::string>();
            if (!rows.emplace(id, ScoreRow{j.at("score").get<double>(), j.at("map_file").get<std::string>()}).second)
                throw_validation("duplicate id '" + id + "' in scores.jsonl");
        } catch (const json::exception& e) {
            throw_validation("scores.jsonl line " + std::to_string(line_no) + ": " + e.what());
        }
    }

    std::vector<std::string> missing_scores, unknown_ids;
    std::set<std::string> pack_ids;
    for (const auto& r : pack.records) {
        pack_ids.insert(r.id);
        if (!rows.count(r.id))
            missing_scores.push_back(r.id);
    }
    for (const auto& [id, row] : rows)
        if (!pack_ids.count(id))
            unknown_ids.push_back(id);
    if (!missing_scores.empty() || !unknown_ids.empty()) {
        std::string msg = "id mismatch between scores and pack;";
        for (const auto& id : missing_scores)
            msg += " no score for '" + id + "';";
        for (const auto& id : unknown_ids)
            msg += " '" + id + "' not in pack;";
        throw_validation(msg);
    }

    std::map<std::string, std::string> category_of;
    if (!a.categories.empty()) {
        json manifest;
        try {
            manifest = json::parse(io::read_file(a.categories));
        } catch (const json::exception& e) {
            throw_validation("category manifest " + a.categories + ": " + e.what());
        }
        std::vector<std::string> absent;
        for (const auto& r : pack.records) {
            if (!manifest.contains(r.id) || !manifest[r.id].is_string())
                absent.push_back(r.id);
            else
                category_of[r.id] = manifest[r.id].get<std::string>();
        }
        if (!absent.empty()) {
            std::string msg = "category manifest lacks ids:";
            for (const auto& id : absent)
                msg += " '" + id + "'";
            throw_validation(msg);
        }
    }

    std::vector<AnomalyMap> maps(pack.records.size());
    std::vector<Bitmap> implicit_masks(pack.records.size());
    std::vector<eval::EvalItem> items;
    for (std::size_t i = 0; i < pack.records.size(); ++i) {
        const ImageRecord& r = pack.records[i];
        const ScoreRow& row = rows.at(r.id);
        eval::EvalItem item;
        item.category = a.categories.empty() ? "all" : category_of.at(r.id);
        item.score = row.score;
        item.label = r.label;
        maps[i] = io::load_map(dir / row.map_file);
        if (maps[i].height != pack.grid.image_h || maps[i].width != pack.grid.image_w)
            throw_validation("map for '" + r.id + "' does not match the pack image size");
        item.map = &maps[i];
        if (r.mask) {
            item.mask = &*r.mask;
        } else if (r.label == 0) {
            implicit_masks[i] = Bitmap(pack.grid.image_h, pack.grid.image_w);
            item.mask = &implicit_masks[i];
        } else {
            err << "warning: anomalous image '" << r.id << "' has no mask; skipped in pixel metrics\n";
        }
        items.push_back(item);
    }

    const eval::EvalReport report = eval::evaluate(items);
    json per_category = json::object();
    for (const auto& [name, m] : report.per_category)
        per_category[name] = metrics_json(m);
    const json j = {{"schema_version", kSchemaVersion},
                    {"metadata", {{"pro_fpr_cap", eval::kProFprCap},
                                  {"pro_thresholds", eval::kProThresholds},
                                  {"pro_connectivity", 8},
                                  {"pro_fpr_cap_source", "conventional; not fixed by the method"}}},
                    {"per_category", per_category},
                    {"average", metrics_json(report.average)}};
    write_json(a.out, j);

    if (!a.csv.empty()) {
        std::string csv = "category,P-AUROC / PRO,I-AUROC / I-AP\n";
        for (const auto& [name, m] : report.per_category)
            csv += name + "," + pct_pair(m.pixel_auroc, m.pro) + "," + pct_pair(m.image_auroc, m.image_ap) + "\n";
        csv += "Average," + pct_pair(report.average.pixel_auroc, report.average.pro) + ","
               + pct_pair(report.average.image_auroc, report.average.image_ap) + "\n";
        io::write_file(a.csv, csv);
    }
    out << "I-AUROC / I-AP " << pct_pair(report.average.image_auroc, report.average.image_ap) << ", P-AUROC / PRO "
        << pct_pair(report.average.pixel_auroc, report.average.pro) << "\n";
}

struct StatsArgs {
    std::string bank, features, weights, out;
    double tau = 1.0;
};

void stats(const StatsArgs& a, std::ostream& out)
{
    const MemoryBank bank = io::load_bank(a.bank);
    const io::FeaturePack pack = io::read_feature_pack(a.features);
    std::optional<MetricWeights> weights;
    if (!a.weights.empty())
        weights = io::load_weights(a.weights);
    check_dims(bank, pack, weights ? &*weights : nullptr);
    const RetrievalParams params = params_with(a.tau, 0.01, 0.05, 0.20);
    const DatasetStats s = retrieval::dataset_statistics(pack.records, pack.grid, bank, params,
                                                         weights ? &*weights : nullptr);
    const json j = {{"schema_version", kSchemaVersion},
                    {"mode", weights ? "fine-tuned" : "train-free"},
                    {"AqAk", optional_number(s.aq_ak)},
                    {"NqAk", optional_number(s.nq_ak)},
                    {"AqNk", optional_number(s.aq_nk)},
                    {"NqNk", optional_number(s.nq_nk)},
                    {"margin_A", optional_number(s.margin_a)},
                    {"margin_N", optional_number(s.margin_n)},
                    {"anomalous_queries", s.anomalous_queries},
                    {"normal_queries", s.normal_queries}};
    write_json(a.out, j);
    out << "margin_A=" << (s.margin_a ? std::to_string(*s.margin_a) : "n/a") << "\n";
}

struct SubsampleArgs {
    std::string bank, out;
    std::size_t n = 0;
    std::uint64_t seed = 0;
};

void subsample(const SubsampleArgs& a, std::ostream& out)
{
    const MemoryBank bank = io::load_bank(a.bank);
    const MemoryBank sub = membank::subsample_bank(bank, a.n, a.seed);
    io::save_bank(sub, a.out);
    out << "N_c=" << sub.image_entries() << " N_p=" << sub.patch_entries() << "\n";
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Memory-retrieval anomaly detection"};
    app.require_subcommand(1);

    BuildArgs build_args;
    auto* build_cmd = app.add_subcommand("build-memory", "Build a two-level memory bank from a feature pack");
    build_cmd->add_option("--features", build_args.features, "Auxiliary feature pack (.fpk)")->required();
    build_cmd->add_option("--out", build_args.out, "Output memory bank (.mrb)")->required();
    build_cmd->add_option("--tag", build_args.tag, "Source tag stored in the bank");
    build_cmd->add_flag("--log", build_args.log, "Print per-image construction details");

    ScoreArgs score_args;
    auto* score_cmd = app.add_subcommand("score", "Score images and write anomaly maps");
    score_cmd->add_option("--bank", score_args.bank, "Memory bank (.mrb)")->required();
    score_cmd->add_option("--features", score_args.features, "Query feature pack (.fpk)")->required();
    score_cmd->add_option("--out", score_args.out, "Output directory")->required();
    score_cmd->add_option("--weights", score_args.weights, "Fine-tuned metric weights (.mrw)");
    score_cmd->add_option("--tau", score_args.tau, "Softmax temperature")->capture_default_str();
    score_cmd->add_option("--topk", score_args.topk, "Top-k fraction of map pixels")->capture_default_str();
    score_cmd->add_option("--smooth-sigma", score_args.smooth_sigma, "Gaussian smoothing of maps, pixels")
        ->capture_default_str();
    score_cmd->add_flag("--pixel-only", score_args.pixel_only, "Image score from the map alone");
    score_cmd->add_flag("--render-png", score_args.render_png, "Also write colour-mapped PNG heatmaps");

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "Fine-tune the retrieval metric");
    train_cmd->add_option("--bank", train_args.bank, "Memory bank (.mrb)")->required();
    train_cmd->add_option("--features", train_args.features, "Auxiliary feature pack (.fpk)")->required();
    train_cmd->add_option("--out", train_args.out, "Output weights (.mrw)")->required();
    train_cmd->add_option("--log", train_args.log, "Training log path (default OUT.log.jsonl)");
    train_cmd->add_option("--lr", train_args.lr, "Adam learning rate")->capture_default_str();
    train_cmd->add_option("--batch", train_args.batch, "Batch size")->capture_default_str();
    train_cmd->add_option("--epochs", train_args.epochs, "Epochs")->capture_default_str();
    train_cmd->add_option("--rho-seg", train_args.rho_seg, "Similarity dropout, patch head")->capture_default_str();
    train_cmd->add_option("--rho-cls", train_args.rho_cls, "Similarity dropout, image head")->capture_default_str();
    train_cmd->add_option("--tau", train_args.tau, "Softmax temperature")->capture_default_str();
    train_cmd->add_option("--seed", train_args.seed, "Shuffle seed")->capture_default_str();

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "Compute AUROC / AP / pixel AUROC / PRO");
    eval_cmd->add_option("--scores", eval_args.scores, "Directory written by score")->required();
    eval_cmd->add_option("--features", eval_args.features, "Query feature pack with labels and masks")->required();
    eval_cmd->add_option("--out", eval_args.out, "Report (.json)")->required();
    eval_cmd->add_option("--categories", eval_args.categories, "JSON manifest: id -> category");
    eval_cmd->add_option("--csv", eval_args.csv, "Optional CSV table");

    StatsArgs stats_args;
    auto* stats_cmd = app.add_subcommand("stats", "Dataset-level retrieval statistics");
    stats_cmd->add_option("--bank", stats_args.bank, "Memory bank (.mrb)")->required();
    stats_cmd->add_option("--features", stats_args.features, "Query feature pack with masks")->required();
    stats_cmd->add_option("--weights", stats_args.weights, "Fine-tuned metric weights (.mrw)");
    stats_cmd->add_option("--out", stats_args.out, "Output (.json)")->required();
    stats_cmd->add_option("--tau", stats_args.tau, "Softmax temperature")->capture_default_str();

    SubsampleArgs sub_args;
    auto* sub_cmd = app.add_subcommand("subsample", "Randomly subsample the patch-level memory");
    sub_cmd->add_option("--bank", sub_args.bank, "Memory bank (.mrb)")->required();
    sub_cmd->add_option("--n", sub_args.n, "Patch entries to keep")->required();
    sub_cmd->add_option("--seed", sub_args.seed, "Sampling seed")->capture_default_str();
    sub_cmd->add_option("--out", sub_args.out, "Output memory bank (.mrb)")->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return exit_code(ErrorKind::Validation);
    }

    try {
        if (*build_cmd)
            build_memory(build_args, out, err);
        else if (*score_cmd)
            score(score_args, out);
        else if (*train_cmd)
            train(train_args, out);
        else if (*eval_cmd)
            evaluate(eval_args, out, err);
        else if (*stats_cmd)
            stats(stats_args, out);
        else if (*sub_cmd)
            subsample(sub_args, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code(ErrorKind::Io);
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

} // namespace mrad::cli
