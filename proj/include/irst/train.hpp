#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "irst/nets.hpp"
#include "irst/synthgen.hpp"

namespace irst {

enum class ModelKind { seg, box };
enum class LossKind { iou, giou, diou, ciou, sdb, soft_iou, dice, sls, sdm };

std::string to_string(ModelKind k);
std::string to_string(LossKind k);
ModelKind model_kind_from(const std::string& s);
LossKind loss_kind_from(const std::string& s);
bool is_box_loss(LossKind k);

/// One training run: data source, model, loss, optimizer and seeds. Box
/// losses pair with the box model, mask losses with the segmentation model.
struct ExperimentConfig {
    std::string dataset_dir;  // when empty, gen_spec/gen_count are used
    SceneSpec gen_spec;
    int gen_count = 250;
    double train_fraction = 0.8;
    double jitter_iou_drop = 0.0;  // training labels only
    std::uint64_t jitter_seed = 7777;

    ModelKind model = ModelKind::seg;
    StemKind stem = StemKind::conv;
    std::vector<int> stem_k = {3, 3};
    int base_channels = 8;

    LossKind loss = LossKind::sdm;
    double delta = 0.5;
    double r_oc = 1.0;

    double lr = 0.05;
    double momentum = 0.9;
    int batch_size = 8;
    int epochs = 25;
    std::uint64_t seed = 0;

    double seg_threshold = 0.5;
    double pr_iou_threshold = 0.45;

    void validate() const;
    nlohmann::ordered_json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
};

struct EpochLog {
    double total = 0, scale_part = 0, location_part = 0;
    double beta_scale = 0, beta_location = 0;
    double val_metric = 0;
};

struct EvalResult {
    // detection
    double precision = 0, recall = 0, map50 = 0;
    double precision50 = 0, recall50 = 0;  // P/R at the 0.5 threshold variant
    // segmentation
    double iou = 0, pd = 0, fa = 0;
    double primary = 0;  // mAP50 for boxes, IoU for masks
};

struct RunReport {
    ExperimentConfig config;
    std::vector<EpochLog> epochs;
    EvalResult final_metrics;
    int best_epoch = -1;
    bool learned = false;  // final train loss <= half of the first epoch's
    double wall_seconds = 0;

    nlohmann::ordered_json to_json() const;
};

/// A trained network plus enough metadata to rebuild and reload it.
struct TrainedModel {
    ModelKind kind = ModelKind::seg;
    StemKind stem = StemKind::conv;
    std::vector<int> stem_k = {3, 3};
    int base_channels = 8;
    std::optional<SegNet> seg;
    std::optional<BoxNet> box;

    nlohmann::ordered_json to_json() const;
    static TrainedModel from_json(const nlohmann::json& j);
};

void save_model(const TrainedModel& model, const std::string& path);
TrainedModel load_model(const std::string& path);

struct TrainOutcome {
    RunReport report;
    TrainedModel model;
};

/// Deterministic for a fixed config: dataset, init, batching and reduction
/// order are all derived from the seeds. Divergence (non-finite loss)
/// aborts with the offending epoch/step in the message.
TrainOutcome train(const ExperimentConfig& cfg,
                   const std::vector<SceneSample>* shared_data = nullptr);

EvalResult evaluate(TrainedModel& model, const std::vector<SceneSample>& data,
                    double seg_threshold = 0.5, double pr_iou_threshold = 0.45);

/// Runs every (stem x loss x seed) cell of the grid, writes results.csv and
/// results.json (cells plus per-cell medians over seeds) into out_dir.
nlohmann::ordered_json ablate(const nlohmann::json& grid, const std::string& out_dir,
                              int jobs = 1);

/// Parameter-count and receptive-field table over k in {3..kmax} and the
/// given channel widths; returns CSV text.
std::string analyze_csv(int kmax, const std::vector<int>& channels);

}  // namespace irst
