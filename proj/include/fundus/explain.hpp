#pragma once

// Saliency methods: occlusion, integrated gradients, Grad-CAM, plus the
// panel export that lines them up next to the input.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fundus/ganomaly.hpp"
#include "fundus/imaging.hpp"
#include "fundus/unet.hpp"
#include "fundus/vit.hpp"

namespace fundus::explain {

using ad::Tensor;

struct SaliencyMap {
    std::size_t height = 0, width = 0;
    std::vector<double> values;  // raw, H*W
    std::string method;
    double raw_min = 0, raw_max = 0;

    /// Records raw_min / raw_max from values; throws DomainError on non-finite entries.
    void record_range();
    /// Min-max scaled copy in [0,1]; all zeros when the map is constant.
    std::vector<double> normalized() const;
    double sum() const;
};

/// x[B,3,S,S] -> per-sample scores [B].
template <typename T>
using ScoreFn = std::function<Tensor<T>(const Tensor<T>&)>;

/// Softmax probability of class cls.
template <typename T>
ScoreFn<T> class_probability(const vit::ViT<T>& model, int cls);
/// Raw logit of class cls.
template <typename T>
ScoreFn<T> class_logit(const vit::ViT<T>& model, int cls);

struct OcclusionResult {
    SaliencyMap impact;
    std::vector<std::uint8_t> p90;  // H*W, 1 on pixels of top-decile patches
    std::size_t patch = 0;
};

/// Non-overlapping patches replaced by baseline_value in every channel;
/// impact = score(original) - score(occluded), broadcast over the patch.
template <typename T>
OcclusionResult occlusion(const imaging::Image& img, const ScoreFn<T>& score, std::size_t patch,
                          float baseline_value, std::size_t batch = 16);

/// (img - baseline) * mean_k grad score(baseline + k/steps (img - baseline)),
/// k = 1..steps, summed over channels.
template <typename T>
SaliencyMap integrated_gradients(const imaging::Image& img, const ScoreFn<T>& score,
                                 const imaging::Image& baseline, std::size_t steps = 256,
                                 std::size_t batch = 16);

/// Patch-token activations entering block block_index weighted by their
/// token-averaged gradients of the class score, ReLU, nearest-upsampled to
/// the image. Outputs of the last block cannot be used: only its class token
/// reaches the head.
template <typename T>
SaliencyMap grad_cam(const imaging::Image& img, const vit::ViT<T>& model, std::size_t block_index, int cls);

template <typename T>
SaliencyMap attention_mask(const imaging::Image& img, const unet::MaskUNet<T>& masker);

/// Channel-summed |x - x_hat| of the detector's reconstruction.
template <typename T>
SaliencyMap reconstruction_error(const imaging::Image& img, const ganomaly::Generator<T>& g);

/// Input followed by each map as normalised gray, left to right.
imaging::Image make_panel(const imaging::Image& img, const std::vector<SaliencyMap>& maps);
void export_panel(const std::filesystem::path& path, const imaging::Image& img,
                  const std::vector<SaliencyMap>& maps);
/// Single normalised map as an 8-bit gray PNG.
void export_map(const std::filesystem::path& path, const SaliencyMap& map);

}  // namespace fundus::explain
