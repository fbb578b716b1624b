#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "irst/box_loss.hpp"
#include "irst/mask_loss.hpp"
#include "irst/png_io.hpp"

namespace irst {

/// Recipe for one synthetic infrared-small-target benchmark: Gaussian
/// intensity bumps on a cluttered low-frequency background.
struct SceneSpec {
    int height = 48;
    int width = 48;
    int min_targets = 1;
    int max_targets = 3;
    double amp_lo = 0.12, amp_hi = 0.35;      // contrast over local background
    double sigma_lo = 0.7, sigma_hi = 2.0;    // Gaussian spread in pixels
    double clutter_density = 0.002;            // blobs per pixel
    double gradient_strength = 0.10;
    double noise_std = 0.02;
    double large_target_fraction = 0.0;       // fraction allowed to exceed 81 px
    int num_classes = 2;                      // 1 = uav only, 2 = uav + bird
    double bird_fraction = 0.37;
    double bird_amp_scale = 0.55;
    bool omit_bird_masks = false;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Per-target generation record (the true center, not the label).
struct TargetMeta {
    double cx = 0, cy = 0;
    double amplitude = 0;
    double sigma = 0;
    int area = 0;  // mask pixel count
    int class_id = 0;
};

/// One synthetic frame with both label regimes and generation metadata.
struct SceneSample {
    Image image;
    std::vector<LabeledBox> boxes;
    BinMask mask;
    std::vector<TargetMeta> targets;
};

/// Deterministic dataset: identical (spec, n) pairs produce byte-identical
/// results on every run.
std::vector<SceneSample> generate(const SceneSpec& spec, int n);

/// Perturbs labels so the jittered box/mask keeps IoU >= 1 - iou_drop with
/// the clean label while centroids shift by less than one pixel. Component
/// counts are preserved. iou_drop = 0 is the identity.
std::vector<SceneSample> label_jitter(const std::vector<SceneSample>& data, double iou_drop,
                                      std::uint64_t seed = 1);

/// On-disk layout: dir/images/NNNNNN.png (16-bit gray),
/// dir/labels/NNNNNN.json, dir/manifest.json (spec echo + count + hash).
void save_dataset(const std::vector<SceneSample>& data, const SceneSpec& spec,
                  const std::string& dir);
std::vector<SceneSample> load_dataset(const std::string& dir);

/// FNV-1a content hash over label and image bytes, as stored in the manifest.
std::string dataset_hash(const std::string& dir);

}  // namespace irst
