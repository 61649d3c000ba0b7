#pragma once

// Encoder-decoder-encoder anomaly detector with adversarial feature matching,
// an optional KL-regularised latent space and an optional attention-masked
// percentile reconstruction loss.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fundus/nn.hpp"
#include "fundus/optim.hpp"

namespace fundus::ganomaly {

using ad::Tensor;

enum class Variant { vanilla, kl, kl_mask };
Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);

enum class ScoreMode { latent, blended };
ScoreMode parse_score_mode(const std::string& name);

struct LossWeights {
    double rec = 50.0;
    double adv = 1.0;
    double lat = 1.0;
    double kl = 0.3;
    double mask = 50.0;
};

struct GanomalyConfig {
    std::size_t image_side = 64;
    std::size_t latent_dim = 64;
    std::array<std::size_t, 4> widths{16, 32, 64, 128};
    Variant variant = Variant::vanilla;
    LossWeights weights;
    ScoreMode score_mode = ScoreMode::latent;

    /// widths 32, 64, 128, 256 and latent 128 at side 224
    static GanomalyConfig full_scale();
    bool stochastic() const { return variant != Variant::vanilla; }
    void validate() const;
};

/// Four stride-2 convolution stages, then linear heads to the latent mean
/// and (optionally) log-variance.
template <typename T>
class Encoder {
public:
    Encoder() = default;
    Encoder(nn::ParamList<T>& params, const std::string& name, const GanomalyConfig& cfg, bool logvar_head,
            nn::Rng& rng);

    struct Output {
        Tensor<T> mu, logvar;  // logvar undefined without the head
    };
    /// features_out receives the activation after each stage.
    Output operator()(const Tensor<T>& x, std::vector<Tensor<T>>* features_out = nullptr) const;

    std::array<nn::Conv2d<T>, 4> convs;
    std::array<nn::AdaptiveNorm<T>, 3> norms;  // stages 2..4
    nn::Linear<T> mu_head, logvar_head;
    std::size_t final_side = 0;
};

template <typename T>
class Decoder {
public:
    Decoder() = default;
    Decoder(nn::ParamList<T>& params, const std::string& name, const GanomalyConfig& cfg, nn::Rng& rng);
    /// z[B,latent] -> x_hat[B,3,S,S] in (0,1).
    Tensor<T> operator()(const Tensor<T>& z) const;

    nn::Linear<T> project;
    std::array<nn::Conv2d<T>, 4> convs;
    std::array<nn::AdaptiveNorm<T>, 3> norms;
    std::size_t start_side = 0, start_channels = 0;
};

template <typename T>
struct EdeOutput {
    Tensor<T> x_hat, z, z_hat, mu, logvar;
};

template <typename T>
class Generator {
public:
    Generator(const GanomalyConfig& cfg, std::uint64_t seed);

    /// z = mu, or mu + exp(logvar / 2) * eps in the KL variants when eps is
    /// given ([B, latent]).
    EdeOutput<T> forward(const Tensor<T>& x, const Tensor<T>* eps = nullptr) const;

    const GanomalyConfig& config() const { return cfg_; }
    nn::ParamList<T>& params() { return params_; }
    const nn::ParamList<T>& params() const { return params_; }

private:
    GanomalyConfig cfg_;
    nn::ParamList<T> params_;
    Encoder<T> enc1_;
    Decoder<T> dec_;
    Encoder<T> enc2_;
};

template <typename T>
class Discriminator {
public:
    Discriminator(const GanomalyConfig& cfg, std::uint64_t seed);

    struct Output {
        Tensor<T> logits;    // [B]
        Tensor<T> features;  // stage-3 activation
    };
    Output forward(const Tensor<T>& x) const;

    nn::ParamList<T>& params() { return params_; }
    const nn::ParamList<T>& params() const { return params_; }

private:
    nn::ParamList<T> params_;
    Encoder<T> body_;
    nn::Linear<T> head_;
};

template <typename T>
struct LossTerms {
    Tensor<T> rec, adv, lat, kl, mask, total;
};

/// mean over batch and latent dims of 1/2 (mu^2 + sigma^2 - log sigma^2 - 1).
template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& mu, const Tensor<T>& logvar);

/// w_rec mean|x - x_hat| + w_adv mean (f(x) - f(x_hat))^2 + w_lat mean (z - z_hat)^2
/// [+ w_kl KL in the KL variants] [+ w_mask masked loss when given].
template <typename T>
LossTerms<T> generator_losses(const Tensor<T>& x, const EdeOutput<T>& out, const Tensor<T>& feat_real,
                              const Tensor<T>& feat_fake, const GanomalyConfig& cfg,
                              const Tensor<T>* masked_loss = nullptr);

/// ceil(0.1 n)
std::size_t p90_count(std::size_t n);
/// Flags of the p90_count(n) largest values; among equal values the higher
/// index ranks higher.
std::vector<std::uint8_t> p90_select(std::span<const double> values);

/// Mean over the pixels above the 90th percentile of the channel-summed
/// M * x of the channel-summed |x - x_hat|. Selection is a constant.
template <typename T>
Tensor<T> masked_percentile_loss(const Tensor<T>& x, const Tensor<T>& x_hat, const Tensor<T>& mask);

template <typename T>
struct DiscriminatorLoss {
    Tensor<T> real, fake, total;  // total = real + fake
};
/// BCE(real_logits, 1) + BCE(fake_logits, 0).
template <typename T>
DiscriminatorLoss<T> discriminator_objective(const Tensor<T>& real_logits, const Tensor<T>& fake_logits);
/// discriminator_objective on D(x) and D(x_hat) with x_hat detached.
template <typename T>
DiscriminatorLoss<T> discriminator_loss(const Discriminator<T>& d, const Tensor<T>& x, const Tensor<T>& x_hat);

struct AnomalyRecord {
    double score = 0;
    std::vector<float> error_map;      // H*W, channel-summed |x - x_hat|
    std::vector<std::uint8_t> p90_map;  // H*W, 1 on the selected pixels
    std::size_t height = 0, width = 0;
};

/// Per-image records for a batch, evaluated with z = mu.
template <typename T>
std::vector<AnomalyRecord> anomaly_score(const Generator<T>& g, const Tensor<T>& x);
/// Score of one image from a forward pass.
template <typename T>
std::vector<double> latent_scores(const EdeOutput<T>& out);

template <typename T>
struct StepStats {
    double rec = 0, adv = 0, lat = 0, kl = 0, mask = 0, total = 0, disc = 0;
};

/// One alternating update: generator on its loss, then the discriminator on
/// BCE. masks is [B,1,S,S] for the kl_mask variant and ignored otherwise.
template <typename T>
StepStats<T> train_step(Generator<T>& g, Discriminator<T>& d, optim::Adam<T>& opt_g, optim::Adam<T>& opt_d,
                        const Tensor<T>& x, std::type_identity_t<const Tensor<T>*> masks, std::mt19937_64& rng,
                        double lr);

}  // namespace fundus::ganomaly
