#include "irst/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "irst/mask_loss.hpp"
#include "irst/metrics.hpp"
#include "irst/ops.hpp"
#include "irst/rng.hpp"

namespace irst {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::string to_string(ModelKind k) { return k == ModelKind::seg ? "seg" : "box"; }

std::string to_string(LossKind k) {
    switch (k) {
        case LossKind::iou: return "iou";
        case LossKind::giou: return "giou";
        case LossKind::diou: return "diou";
        case LossKind::ciou: return "ciou";
        case LossKind::sdb: return "sdb";
        case LossKind::soft_iou: return "soft_iou";
        case LossKind::dice: return "dice";
        case LossKind::sls: return "sls";
        case LossKind::sdm: return "sdm";
    }
    return "?";
}

ModelKind model_kind_from(const std::string& s) {
    if (s == "seg") return ModelKind::seg;
    if (s == "box") return ModelKind::box;
    throw std::runtime_error("unknown model kind: " + s);
}

LossKind loss_kind_from(const std::string& s) {
    for (LossKind k : {LossKind::iou, LossKind::giou, LossKind::diou, LossKind::ciou,
                       LossKind::sdb, LossKind::soft_iou, LossKind::dice, LossKind::sls,
                       LossKind::sdm})
        if (to_string(k) == s) return k;
    throw std::runtime_error("unknown loss kind: " + s);
}

bool is_box_loss(LossKind k) {
    return k == LossKind::iou || k == LossKind::giou || k == LossKind::diou ||
           k == LossKind::ciou || k == LossKind::sdb;
}

void ExperimentConfig::validate() const {
    if (is_box_loss(loss) != (model == ModelKind::box))
        throw std::runtime_error("config: loss " + to_string(loss) + " does not fit model " +
                                 to_string(model));
    if (batch_size < 1 || epochs < 1) throw std::runtime_error("config: bad batch size or epochs");
    if (!(lr > 0)) throw std::runtime_error("config: learning rate must be positive");
    if (!(train_fraction > 0 && train_fraction < 1))
        throw std::runtime_error("config: train fraction must lie in (0,1)");
    if (loss == LossKind::sdb || loss == LossKind::sdm)
        (void)make_scale_context(r_oc, delta);  // validates and warns
    if (base_channels < 4 || base_channels % 4 != 0)
        throw std::runtime_error("config: base channels must be a positive multiple of 4");
}

namespace {

SceneSpec spec_from_json(const nlohmann::json& j) {
    SceneSpec s;
    s.height = j.value("height", s.height);
    s.width = j.value("width", s.width);
    s.min_targets = j.value("min_targets", s.min_targets);
    s.max_targets = j.value("max_targets", s.max_targets);
    s.amp_lo = j.value("amp_lo", s.amp_lo);
    s.amp_hi = j.value("amp_hi", s.amp_hi);
    s.sigma_lo = j.value("sigma_lo", s.sigma_lo);
    s.sigma_hi = j.value("sigma_hi", s.sigma_hi);
    s.clutter_density = j.value("clutter_density", s.clutter_density);
    s.gradient_strength = j.value("gradient_strength", s.gradient_strength);
    s.noise_std = j.value("noise_std", s.noise_std);
    s.large_target_fraction = j.value("large_target_fraction", s.large_target_fraction);
    s.num_classes = j.value("num_classes", s.num_classes);
    s.bird_fraction = j.value("bird_fraction", s.bird_fraction);
    s.bird_amp_scale = j.value("bird_amp_scale", s.bird_amp_scale);
    s.omit_bird_masks = j.value("omit_bird_masks", s.omit_bird_masks);
    s.seed = j.value("seed", s.seed);
    return s;
}

ordered_json spec_to_json(const SceneSpec& s) {
    ordered_json j;
    j["height"] = s.height;
    j["width"] = s.width;
    j["min_targets"] = s.min_targets;
    j["max_targets"] = s.max_targets;
    j["amp_lo"] = s.amp_lo;
    j["amp_hi"] = s.amp_hi;
    j["sigma_lo"] = s.sigma_lo;
    j["sigma_hi"] = s.sigma_hi;
    j["clutter_density"] = s.clutter_density;
    j["gradient_strength"] = s.gradient_strength;
    j["noise_std"] = s.noise_std;
    j["large_target_fraction"] = s.large_target_fraction;
    j["num_classes"] = s.num_classes;
    j["bird_fraction"] = s.bird_fraction;
    j["bird_amp_scale"] = s.bird_amp_scale;
    j["omit_bird_masks"] = s.omit_bird_masks;
    j["seed"] = s.seed;
    return j;
}

}  // namespace

ordered_json ExperimentConfig::to_json() const {
    ordered_json j;
    j["dataset_dir"] = dataset_dir;
    j["gen_spec"] = spec_to_json(gen_spec);
    j["gen_count"] = gen_count;
    j["train_fraction"] = train_fraction;
    j["jitter_iou_drop"] = jitter_iou_drop;
    j["jitter_seed"] = jitter_seed;
    j["model"] = to_string(model);
    j["stem"] = to_string(stem);
    j["stem_k"] = stem_k;
    j["base_channels"] = base_channels;
    j["loss"] = to_string(loss);
    j["delta"] = delta;
    j["r_oc"] = r_oc;
    j["lr"] = lr;
    j["momentum"] = momentum;
    j["batch_size"] = batch_size;
    j["epochs"] = epochs;
    j["seed"] = seed;
    j["seg_threshold"] = seg_threshold;
    j["pr_iou_threshold"] = pr_iou_threshold;
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    c.dataset_dir = j.value("dataset_dir", std::string());
    if (j.contains("gen_spec")) c.gen_spec = spec_from_json(j.at("gen_spec"));
    c.gen_count = j.value("gen_count", c.gen_count);
    c.train_fraction = j.value("train_fraction", c.train_fraction);
    c.jitter_iou_drop = j.value("jitter_iou_drop", c.jitter_iou_drop);
    c.jitter_seed = j.value("jitter_seed", c.jitter_seed);
    c.model = model_kind_from(j.value("model", std::string("seg")));
    c.stem = stem_kind_from(j.value("stem", std::string("conv")));
    c.stem_k = j.value("stem_k", c.stem_k);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.loss = loss_kind_from(j.value("loss", std::string("sdm")));
    c.delta = j.value("delta", c.delta);
    c.r_oc = j.value("r_oc", c.r_oc);
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.seg_threshold = j.value("seg_threshold", c.seg_threshold);
    c.pr_iou_threshold = j.value("pr_iou_threshold", c.pr_iou_threshold);
    return c;
}

ordered_json RunReport::to_json() const {
    ordered_json j;
    j["config"] = config.to_json();
    j["epochs"] = ordered_json::array();
    for (const auto& e : epochs) {
        ordered_json je;
        je["total"] = e.total;
        je["scale_part"] = e.scale_part;
        je["location_part"] = e.location_part;
        je["beta_scale"] = e.beta_scale;
        je["beta_location"] = e.beta_location;
        je["val_metric"] = e.val_metric;
        j["epochs"].push_back(je);
    }
    ordered_json jm;
    jm["precision"] = final_metrics.precision;
    jm["recall"] = final_metrics.recall;
    jm["map50"] = final_metrics.map50;
    jm["precision50"] = final_metrics.precision50;
    jm["recall50"] = final_metrics.recall50;
    jm["iou"] = final_metrics.iou;
    jm["pd"] = final_metrics.pd;
    jm["fa"] = final_metrics.fa;
    jm["primary"] = final_metrics.primary;
    j["final_metrics"] = jm;
    j["best_epoch"] = best_epoch;
    j["learned"] = learned;
    j["wall_seconds"] = wall_seconds;
    return j;
}

// ---- model (de)serialization -------------------------------------------------

ordered_json TrainedModel::to_json() const {
    ordered_json j;
    j["format"] = 1;
    j["kind"] = to_string(kind);
    j["stem"] = irst::to_string(stem);
    j["stem_k"] = stem_k;
    j["base_channels"] = base_channels;

    std::vector<Tensor> params = kind == ModelKind::seg
                                     ? const_cast<SegNet&>(*seg).params()
                                     : const_cast<BoxNet&>(*box).params();
    j["params"] = ordered_json::array();
    for (const auto& p : params) {
        ordered_json arr = ordered_json::array();
        for (real_t v : p.values()) arr.push_back(double(v));
        j["params"].push_back(arr);
    }
    auto bns = kind == ModelKind::seg ? const_cast<SegNet&>(*seg).bn_states()
                                      : const_cast<BoxNet&>(*box).bn_states();
    j["bn"] = ordered_json::array();
    for (const auto* s : bns) {
        ordered_json jb;
        jb["mean"] = std::vector<double>(s->running_mean.begin(), s->running_mean.end());
        jb["var"] = std::vector<double>(s->running_var.begin(), s->running_var.end());
        j["bn"].push_back(jb);
    }
    return j;
}

TrainedModel TrainedModel::from_json(const nlohmann::json& j) {
    TrainedModel m;
    m.kind = model_kind_from(j.at("kind").get<std::string>());
    m.stem = stem_kind_from(j.at("stem").get<std::string>());
    m.stem_k = j.at("stem_k").get<std::vector<int>>();
    m.base_channels = j.at("base_channels").get<int>();
    if (m.kind == ModelKind::seg)
        m.seg = SegNet::make(m.stem, m.stem_k, m.base_channels, 0);
    else
        m.box = BoxNet::make(m.stem, m.stem_k, m.base_channels, 0);

    auto params = m.kind == ModelKind::seg ? m.seg->params() : m.box->params();
    const auto& jp = j.at("params");
    if (jp.size() != params.size())
        throw std::runtime_error("model file: parameter tensor count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto vals = jp[i].get<std::vector<double>>();
        if (std::int64_t(vals.size()) != params[i].numel())
            throw std::runtime_error("model file: parameter size mismatch at index " +
                                     std::to_string(i));
        auto dst = params[i].values();
        for (std::size_t k = 0; k < vals.size(); ++k) dst[k] = real_t(vals[k]);
    }
    auto bns = m.kind == ModelKind::seg ? m.seg->bn_states() : m.box->bn_states();
    const auto& jb = j.at("bn");
    if (jb.size() != bns.size()) throw std::runtime_error("model file: BN state count mismatch");
    for (std::size_t i = 0; i < bns.size(); ++i) {
        const auto mean = jb[i].at("mean").get<std::vector<double>>();
        const auto var = jb[i].at("var").get<std::vector<double>>();
        if (mean.size() != bns[i]->running_mean.size())
            throw std::runtime_error("model file: BN size mismatch at index " + std::to_string(i));
        for (std::size_t k = 0; k < mean.size(); ++k) {
            bns[i]->running_mean[k] = real_t(mean[k]);
            bns[i]->running_var[k] = real_t(var[k]);
        }
    }
    return m;
}

void save_model(const TrainedModel& model, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write model file " + path);
    f << model.to_json().dump() << "\n";
}

TrainedModel load_model(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read model file " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("model file " + path + ": " + e.what());
    }
    return TrainedModel::from_json(j);
}

// ---- training ------------------------------------------------------------------

namespace {

struct Sgd {
    double lr, momentum;
    std::vector<std::vector<real_t>> velocity;

    explicit Sgd(const std::vector<Tensor>& params, double lr, double momentum)
        : lr(lr), momentum(momentum) {
        velocity.reserve(params.size());
        for (const auto& p : params)
            velocity.emplace_back(static_cast<std::size_t>(p.numel()), real_t(0));
    }

    void step(std::vector<Tensor>& params) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto v = params[i].values();
            auto g = params[i].grad();
            auto& vel = velocity[i];
            for (std::size_t k = 0; k < vel.size(); ++k) {
                vel[k] = real_t(momentum) * vel[k] + g[k];
                v[k] -= real_t(lr) * vel[k];
            }
        }
    }
};

Tensor batch_tensor(const std::vector<SceneSample>& data, const std::vector<std::size_t>& idx) {
    const int h = data[idx[0]].image.h, w = data[idx[0]].image.w;
    auto x = Tensor::zeros({std::int64_t(idx.size()), 1, h, w});
    auto xv = x.values();
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(data[idx[i]].image.v.begin(), data[idx[i]].image.v.end(),
                  xv.data() + std::int64_t(i) * h * w);
    return x;
}

TapedLoss<real_t> seg_loss_for(LossKind kind, Tape* tape, const Tensor& probs,
                               const BinMask& gt, const ScaleContext& ctx) {
    TapedLoss<real_t> out;
    switch (kind) {
        case LossKind::soft_iou:
            out.total = add_scalar(tape, neg(tape, soft_iou(tape, probs, gt)), real_t(1));
            break;
        case LossKind::dice:
            out.total = dice_loss(tape, probs, gt);
            break;
        case LossKind::sls:
            return sdm_core(tape, probs, gt, 0.0);
        case LossKind::sdm:
            return sdm_loss(tape, probs, gt, ctx);
        default:
            throw std::runtime_error("not a mask loss: " + to_string(kind));
    }
    out.report.scale_part = double(out.total.item());
    out.report.location_part = 0.0;
    out.report.total = out.report.scale_part;
    return out;
}

TapedLoss<real_t> box_loss_for(LossKind kind, Tape* tape, const BoxVar<real_t>& pred,
                               const Box& gt, const ScaleContext& ctx) {
    TapedLoss<real_t> out;
    switch (kind) {
        case LossKind::iou:
            out.total = iou_loss_t(tape, pred, gt);
            break;
        case LossKind::giou:
            out.total = giou_loss_t(tape, pred, gt);
            break;
        case LossKind::diou:
            out.total = diou_loss_t(tape, pred, gt);
            break;
        case LossKind::ciou: {
            auto ls = loss_bs_t(tape, pred, gt);
            auto ll = loss_bl_t(tape, pred, gt);
            out.total = add(tape, ls, ll);
            out.report.scale_part = double(ls.item());
            out.report.location_part = double(ll.item());
            out.report.total = double(out.total.item());
            return out;
        }
        case LossKind::sdb:
            return sdb_loss_t(tape, pred, gt, ctx);
        default:
            throw std::runtime_error("not a box loss: " + to_string(kind));
    }
    out.report.scale_part = double(out.total.item());
    out.report.location_part = 0.0;
    out.report.total = out.report.scale_part;
    return out;
}

EvalResult eval_seg(SegNet& net, const std::vector<SceneSample>& data, double threshold,
                    int batch_size) {
    const bool was_training = net.training;
    net.training = false;
    SegTally tally;
    for (std::size_t start = 0; start < data.size(); start += std::size_t(batch_size)) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(data.size(), start + std::size_t(batch_size));
             ++i)
            idx.push_back(i);
        auto out = net.forward(nullptr, batch_tensor(data, idx));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            auto probs = slice_batch<real_t>(nullptr, out, std::int64_t(i));
            tally.merge(seg_tally(threshold_mask(probs, threshold), data[idx[i]].mask));
        }
    }
    net.training = was_training;
    const auto m = seg_metrics_from(tally);
    EvalResult r;
    r.iou = m.iou;
    r.pd = m.pd;
    r.fa = m.fa;
    r.primary = m.iou;
    return r;
}

EvalResult eval_box(BoxNet& net, const std::vector<SceneSample>& data, double pr_threshold,
                    int batch_size) {
    const bool was_training = net.training;
    net.training = false;
    std::vector<std::vector<Detection>> preds(data.size());
    std::vector<std::vector<LabeledBox>> gts(data.size());
    for (std::size_t start = 0; start < data.size(); start += std::size_t(batch_size)) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(data.size(), start + std::size_t(batch_size));
             ++i)
            idx.push_back(i);
        auto x = batch_tensor(data, idx);
        auto head = net.forward(nullptr, x);
        const int w = data[idx[0]].image.w, h = data[idx[0]].image.h;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            auto bv = net.box_for(nullptr, head, std::int64_t(i), w, h);
            preds[idx[i]].push_back({bv.value(), 0, 1.0});
            gts[idx[i]] = data[idx[i]].boxes;
        }
    }
    net.training = was_training;

    Tally t45, t50;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto a = match_detections(preds[i], gts[i], pr_threshold);
        const auto b = match_detections(preds[i], gts[i], 0.5);
        t45.tp += a.tp;
        t45.fp += a.fp;
        t45.fn += a.fn;
        t50.tp += b.tp;
        t50.fp += b.fp;
        t50.fn += b.fn;
    }
    EvalResult r;
    std::tie(r.precision, r.recall) = precision_recall(t45);
    std::tie(r.precision50, r.recall50) = precision_recall(t50);
    r.map50 = map50(preds, gts);
    r.primary = r.map50;
    return r;
}

}  // namespace

EvalResult evaluate(TrainedModel& model, const std::vector<SceneSample>& data,
                    double seg_threshold, double pr_iou_threshold) {
    if (model.kind == ModelKind::seg)
        return eval_seg(*model.seg, data, seg_threshold, 16);
    return eval_box(*model.box, data, pr_iou_threshold, 16);
}

TrainOutcome train(const ExperimentConfig& cfg, const std::vector<SceneSample>* shared_data) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<SceneSample> owned;
    const std::vector<SceneSample>* data = shared_data;
    if (!data) {
        owned = cfg.dataset_dir.empty() ? generate(cfg.gen_spec, cfg.gen_count)
                                        : load_dataset(cfg.dataset_dir);
        data = &owned;
    }
    if (data->empty()) throw std::runtime_error("train: empty dataset");

    const std::size_t n_train =
        std::max<std::size_t>(1, std::size_t(std::llround(cfg.train_fraction * double(data->size()))));
    if (n_train >= data->size()) throw std::runtime_error("train: no samples left for testing");
    std::vector<SceneSample> train_set(data->begin(), data->begin() + std::ptrdiff_t(n_train));
    const std::vector<SceneSample> test_set(data->begin() + std::ptrdiff_t(n_train), data->end());
    if (cfg.jitter_iou_drop > 0)
        train_set = label_jitter(train_set, cfg.jitter_iou_drop, cfg.jitter_seed);

    if (cfg.model == ModelKind::box)
        for (const auto& s : *data)
            if (s.boxes.empty())
                throw std::runtime_error("train: box model needs at least one box per image");

    TrainedModel model;
    model.kind = cfg.model;
    model.stem = cfg.stem;
    model.stem_k = cfg.stem_k;
    model.base_channels = cfg.base_channels;
    if (cfg.model == ModelKind::seg)
        model.seg = SegNet::make(cfg.stem, cfg.stem_k, cfg.base_channels, cfg.seed);
    else
        model.box = BoxNet::make(cfg.stem, cfg.stem_k, cfg.base_channels, cfg.seed);

    auto params = cfg.model == ModelKind::seg ? model.seg->params() : model.box->params();
    Sgd opt(params, cfg.lr, cfg.momentum);
    const ScaleContext ctx =
        (cfg.loss == LossKind::sdb || cfg.loss == LossKind::sdm)
            ? make_scale_context(cfg.r_oc, cfg.delta)
            : ScaleContext{cfg.r_oc, cfg.delta, 81.0};

    RunReport report;
    report.config = cfg;
    Rng shuffle_rng(cfg.seed, 0x5e5e5e);
    const int img_h = (*data)[0].image.h, img_w = (*data)[0].image.w;

    double best_metric = -1;
    ordered_json best_snapshot;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(train_set.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[std::size_t(shuffle_rng.uniform_int(0, std::int64_t(i) - 1))]);

        EpochLog log;
        std::size_t images_seen = 0;
        Tape tape;
        for (std::size_t start = 0, step = 0; start < order.size();
             start += std::size_t(cfg.batch_size), ++step) {
            std::vector<std::size_t> idx(
                order.begin() + std::ptrdiff_t(start),
                order.begin() +
                    std::ptrdiff_t(std::min(order.size(), start + std::size_t(cfg.batch_size))));
            try {
                auto x = batch_tensor(train_set, idx);
                Tensor total;
                if (cfg.model == ModelKind::seg) {
                    auto out = model.seg->forward(&tape, x);
                    for (std::size_t i = 0; i < idx.size(); ++i) {
                        auto probs = slice_batch(&tape, out, std::int64_t(i));
                        auto l = seg_loss_for(cfg.loss, &tape, probs, train_set[idx[i]].mask, ctx);
                        total = total.defined() ? add(&tape, total, l.total) : l.total;
                        log.total += l.report.total;
                        log.scale_part += l.report.scale_part;
                        log.location_part += l.report.location_part;
                        log.beta_scale += l.report.beta_scale;
                        log.beta_location += l.report.beta_location;
                    }
                } else {
                    auto head = model.box->forward(&tape, x);
                    for (std::size_t i = 0; i < idx.size(); ++i) {
                        auto pred = model.box->box_for(&tape, head, std::int64_t(i), img_w, img_h);
                        auto l = box_loss_for(cfg.loss, &tape, pred, train_set[idx[i]].boxes[0].box,
                                              ctx);
                        total = total.defined() ? add(&tape, total, l.total) : l.total;
                        log.total += l.report.total;
                        log.scale_part += l.report.scale_part;
                        log.location_part += l.report.location_part;
                        log.beta_scale += l.report.beta_scale;
                        log.beta_location += l.report.beta_location;
                    }
                }
                images_seen += idx.size();
                auto loss = mul_scalar(&tape, total, real_t(1.0 / double(idx.size())));
                tape.backward(loss);
                opt.step(params);
                for (auto& p : params) p.zero_grad();
                tape.reset();
            } catch (const TensorError& e) {
                throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) +
                                         ", step " + std::to_string(step) + ": " + e.what());
            }
        }
        const double inv = images_seen ? 1.0 / double(images_seen) : 0.0;
        log.total *= inv;
        log.scale_part *= inv;
        log.location_part *= inv;
        log.beta_scale *= inv;
        log.beta_location *= inv;

        const EvalResult val = cfg.model == ModelKind::seg
                                   ? eval_seg(*model.seg, test_set, cfg.seg_threshold,
                                              cfg.batch_size)
                                   : eval_box(*model.box, test_set, cfg.pr_iou_threshold,
                                              cfg.batch_size);
        log.val_metric = val.primary;
        report.epochs.push_back(log);
        if (val.primary > best_metric) {
            best_metric = val.primary;
            best_snapshot = model.to_json();
            report.best_epoch = epoch;
        }
    }

    if (!best_snapshot.is_null()) model = TrainedModel::from_json(best_snapshot);
    report.final_metrics =
        cfg.model == ModelKind::seg
            ? eval_seg(*model.seg, test_set, cfg.seg_threshold, cfg.batch_size)
            : eval_box(*model.box, test_set, cfg.pr_iou_threshold, cfg.batch_size);
    report.learned = !report.epochs.empty() &&
                     report.epochs.back().total <= 0.5 * report.epochs.front().total;
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {std::move(report), std::move(model)};
}

// ---- ablation -------------------------------------------------------------------

namespace {

double median(std::vector<double> v) {
    if (v.empty()) return 0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string ks_string(const std::vector<int>& ks) {
    std::string s;
    for (std::size_t i = 0; i < ks.size(); ++i) s += (i ? "-" : "") + std::to_string(ks[i]);
    return s;
}

}  // namespace

ordered_json ablate(const nlohmann::json& grid, const std::string& out_dir, int jobs) {
    const auto model = model_kind_from(grid.value("model", std::string("seg")));
    const auto seeds = grid.at("seeds").get<std::vector<std::uint64_t>>();

    // one dataset per seed, shared by every cell in that seed's row
    std::map<std::uint64_t, std::vector<SceneSample>> datasets;
    SceneSpec base_spec;
    int count = 0;
    std::string dir;
    if (grid.contains("dataset") && grid.at("dataset").contains("dir")) {
        dir = grid.at("dataset").at("dir").get<std::string>();
    } else {
        base_spec = spec_from_json(grid.at("dataset").at("spec"));
        count = grid.at("dataset").value("count", 250);
    }
    for (auto seed : seeds) {
        if (!dir.empty()) {
            datasets[seed] = load_dataset(dir);
        } else {
            SceneSpec s = base_spec;
            s.seed = seed;
            datasets[seed] = generate(s, count);
        }
    }

    struct Cell {
        ExperimentConfig cfg;
        RunReport report;
        bool done = false;
    };
    std::vector<Cell> cells;
    for (const auto& js : grid.at("stems"))
        for (const auto& jl : grid.at("losses"))
            for (auto seed : seeds) {
                ExperimentConfig cfg;
                cfg.model = model;
                cfg.stem = stem_kind_from(js.value("kind", std::string("conv")));
                cfg.stem_k = js.value("k", std::vector<int>{3, 3});
                cfg.loss = loss_kind_from(jl.value("kind", std::string("sdm")));
                cfg.delta = jl.value("delta", 0.5);
                cfg.base_channels = grid.value("base_channels", 8);
                cfg.epochs = grid.value("epochs", 25);
                cfg.lr = grid.value("lr", model == ModelKind::seg ? 0.05 : 0.01);
                cfg.batch_size = grid.value("batch_size", 8);
                cfg.jitter_iou_drop = grid.value("jitter_iou_drop", 0.0);
                cfg.train_fraction = grid.value("train_fraction", 0.8);
                cfg.r_oc = grid.value("r_oc", 1.0);
                cfg.seed = seed;
                cfg.gen_spec = base_spec;
                cfg.gen_spec.seed = seed;
                cfg.gen_count = count;
                cells.push_back({cfg, {}, false});
            }

    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) break;
            auto& cell = cells[i];
            cell.report = train(cell.cfg, &datasets.at(cell.cfg.seed)).report;
            cell.done = true;
        }
    };
    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    // rows + medians over seeds per (stem, k, loss, delta)
    ordered_json out;
    out["grid"] = grid;
    out["cells"] = ordered_json::array();
    std::map<std::string, std::map<std::string, std::vector<double>>> groups;
    std::ostringstream csv;
    csv.precision(17);  // doubles survive the round trip
    csv << "model,stem,stem_k,loss,delta,seed,iou,pd,fa,precision,recall,map50,precision50,"
           "recall50,primary,learned,wall_seconds\n";
    for (const auto& cell : cells) {
        const auto& m = cell.report.final_metrics;
        ordered_json jc;
        jc["model"] = to_string(cell.cfg.model);
        jc["stem"] = irst::to_string(cell.cfg.stem);
        jc["stem_k"] = cell.cfg.stem_k;
        jc["loss"] = to_string(cell.cfg.loss);
        jc["delta"] = cell.cfg.delta;
        jc["seed"] = cell.cfg.seed;
        jc["metrics"] = nlohmann::json::parse(cell.report.to_json()["final_metrics"].dump());
        jc["learned"] = cell.report.learned;
        jc["wall_seconds"] = cell.report.wall_seconds;
        out["cells"].push_back(jc);

        csv << to_string(cell.cfg.model) << ',' << irst::to_string(cell.cfg.stem) << ','
            << ks_string(cell.cfg.stem_k) << ',' << to_string(cell.cfg.loss) << ','
            << cell.cfg.delta << ',' << cell.cfg.seed << ',' << m.iou << ',' << m.pd << ','
            << m.fa << ',' << m.precision << ',' << m.recall << ',' << m.map50 << ','
            << m.precision50 << ',' << m.recall50 << ',' << m.primary << ','
            << (cell.report.learned ? 1 : 0) << ',' << cell.report.wall_seconds << "\n";

        const std::string key = irst::to_string(cell.cfg.stem) + "/" +
                                ks_string(cell.cfg.stem_k) + "/" + to_string(cell.cfg.loss) +
                                "/" + std::to_string(cell.cfg.delta);
        auto& g = groups[key];
        g["iou"].push_back(m.iou);
        g["pd"].push_back(m.pd);
        g["fa"].push_back(m.fa);
        g["map50"].push_back(m.map50);
        g["precision"].push_back(m.precision);
        g["recall"].push_back(m.recall);
        g["primary"].push_back(m.primary);
    }
    out["medians"] = ordered_json::array();
    for (auto& [key, metrics] : groups) {
        ordered_json jm;
        jm["cell"] = key;
        for (auto& [name, vals] : metrics) jm[name] = median(vals);
        out["medians"].push_back(jm);
    }

    fs::create_directories(out_dir);
    std::ofstream jf(fs::path(out_dir) / "results.json");
    jf << out.dump(2) << "\n";
    std::ofstream cf(fs::path(out_dir) / "results.csv");
    cf << csv.str();
    return out;
}

std::string analyze_csv(int kmax, const std::vector<int>& channels) {
    std::ostringstream csv;
    csv << "layer,k,c1,c2,params_exact,params_formula,conv3x3_params,param_ratio,rf_cells,"
           "rf_extent_h,rf_extent_w\n";
    for (int c : channels) {
        const auto conv_rf = receptive_field_conv_block(c, c);
        csv << "conv,3," << c << ',' << c << ',' << conv_block_param_count(c, c) << ','
            << conv_block_param_count(c, c) << ',' << conv_block_param_count(c, c) << ",1,"
            << conv_rf.receptive_field_cells << ',' << conv_rf.extent_h << ','
            << conv_rf.extent_w << "\n";
        for (int k = 3; k <= kmax; ++k) {
            PConvSpec spec{c, c, k, 1};
            const auto rf = receptive_field_pconv(spec);
            csv << "pconv," << k << ',' << c << ',' << c << ',' << pconv_param_count(spec) << ','
                << pconv_param_count_formula(spec) << ',' << conv_block_param_count(c, c) << ','
                << double(pconv_param_count(spec)) / double(conv_block_param_count(c, c)) << ','
                << rf.receptive_field_cells << ',' << rf.extent_h << ',' << rf.extent_w << "\n";
        }
    }
    return csv.str();
}

}  // namespace irst
