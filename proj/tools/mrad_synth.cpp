// Writes a synthetic feature pack and its category manifest, for demos and
// smoke tests of the mrad commands.

#include "mrad/error.hpp"
#include "mrad/io.hpp"
#include "mrad/synthetic.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>

int main(int argc, char** argv)
{
    CLI::App app{"Synthetic feature-pack generator"};
    mrad::synthetic::TaskConfig task;
    std::string out, manifest;
    std::size_t first = 0, categories = 3, per_category = 20;
    double anomaly_fraction = 0.5;
    std::uint64_t split_seed = 1;
    bool normal_masks = false;
    app.add_option("--out", out, "Output feature pack (.fpk)")->required();
    app.add_option("--manifest", manifest, "Output category manifest (.json)");
    app.add_option("--task-seed", task.seed, "Seed of the task (directions)")->capture_default_str();
    app.add_option("--seed", split_seed, "Seed of this split")->capture_default_str();
    app.add_option("--first-category", first, "First category index")->capture_default_str();
    app.add_option("--categories", categories, "Number of categories")->capture_default_str();
    app.add_option("--per-category", per_category, "Images per category")->capture_default_str();
    app.add_option("--anomaly-fraction", anomaly_fraction, "Expected share of anomalous images")
        ->capture_default_str();
    app.add_option("--dim", task.d, "Feature dimension")->capture_default_str();
    app.add_option("--noise", task.noise, "Per-component noise deviation")->capture_default_str();
    app.add_option("--shift", task.shift, "Anomaly shift of patch features")->capture_default_str();
    app.add_flag("--normal-masks", normal_masks, "Store all-zero masks for normal images");
    CLI11_PARSE(app, argc, argv);

    try {
        const mrad::synthetic::Task t(task);
        const auto split = t.generate(first, categories, per_category, anomaly_fraction, split_seed, "", normal_masks);
        mrad::io::write_feature_pack(split.records, t.grid(), task.d, out);
        if (!manifest.empty()) {
            nlohmann::json j = nlohmann::json::object();
            for (std::size_t i = 0; i < split.records.size(); ++i)
                j[split.records[i].id] = split.categories[i];
            mrad::io::write_file(manifest, j.dump(2) + "\n");
        }
        std::cout << "wrote " << split.records.size() << " records to " << out << "\n";
    } catch (const mrad::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return mrad::exit_code(e.kind());
    }
    return 0;
}
