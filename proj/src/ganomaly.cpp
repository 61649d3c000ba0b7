#include "fundus/ganomaly.hpp"

#include <algorithm>
#include <numeric>

#include "fundus/error.hpp"

namespace fundus::ganomaly {

Variant parse_variant(const std::string& name) {
    if (name == "vanilla") return Variant::vanilla;
    if (name == "kl") return Variant::kl;
    if (name == "kl_mask" || name == "kl+mask") return Variant::kl_mask;
    throw ConfigError("unknown GANomaly variant '" + name + "' (vanilla, kl, kl_mask)");
}

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::vanilla: return "vanilla";
        case Variant::kl: return "kl";
        case Variant::kl_mask: return "kl_mask";
    }
    return "?";
}

ScoreMode parse_score_mode(const std::string& name) {
    if (name == "latent") return ScoreMode::latent;
    if (name == "blended") return ScoreMode::blended;
    throw ConfigError("unknown score mode '" + name + "' (latent, blended)");
}

GanomalyConfig GanomalyConfig::full_scale() {
    GanomalyConfig c;
    c.image_side = 224;
    c.latent_dim = 128;
    c.widths = {32, 64, 128, 256};
    return c;
}

void GanomalyConfig::validate() const {
    if (image_side < 16 || image_side % 16 != 0) throw ConfigError("GANomaly image_side must be a multiple of 16");
    if (latent_dim == 0) throw ConfigError("latent_dim must be positive");
    for (auto w : widths)
        if (w == 0) throw ConfigError("GANomaly widths must be positive");
    for (double w : {weights.rec, weights.adv, weights.lat, weights.kl, weights.mask})
        if (!(w >= 0)) throw ConfigError("GANomaly loss weights must be non-negative");
}

// ---- networks --------------------------------------------------------------

template <typename T>
Encoder<T>::Encoder(nn::ParamList<T>& params, const std::string& name, const GanomalyConfig& cfg,
                    bool with_logvar, nn::Rng& rng) {
    std::size_t in = 3;
    for (std::size_t i = 0; i < 4; ++i) {
        convs[i] = nn::Conv2d<T>(params, name + ".conv" + std::to_string(i + 1), in, cfg.widths[i], 4, 2, 1, rng);
        if (i > 0) norms[i - 1] = nn::AdaptiveNorm<T>(params, name + ".norm" + std::to_string(i + 1), cfg.widths[i], true);
        in = cfg.widths[i];
    }
    final_side = cfg.image_side / 16;
    const std::size_t flat = cfg.widths[3] * final_side * final_side;
    mu_head = nn::Linear<T>(params, name + ".mu", flat, cfg.latent_dim, rng);
    if (with_logvar) {
        logvar_head = nn::Linear<T>(params, name + ".logvar", flat, cfg.latent_dim, rng);
        std::fill(logvar_head.weight.mutable_data().begin(), logvar_head.weight.mutable_data().end(), T(0));
    }
}

template <typename T>
typename Encoder<T>::Output Encoder<T>::operator()(const Tensor<T>& x, std::vector<Tensor<T>>* features) const {
    auto h = x;
    for (std::size_t i = 0; i < 4; ++i) {
        h = convs[i](h);
        if (i > 0) h = norms[i - 1](h);
        h = ad::leaky_relu(h, T(0.2));
        if (features) features->push_back(h);
    }
    auto flat = ad::reshape(h, {h.dim(0), h.numel() / h.dim(0)});
    Output out;
    out.mu = mu_head(flat);
    if (logvar_head.weight.defined()) out.logvar = logvar_head(flat);
    return out;
}

template <typename T>
Decoder<T>::Decoder(nn::ParamList<T>& params, const std::string& name, const GanomalyConfig& cfg, nn::Rng& rng) {
    start_side = cfg.image_side / 16;
    start_channels = cfg.widths[3];
    project = nn::Linear<T>(params, name + ".project", cfg.latent_dim, start_channels * start_side * start_side, rng);
    for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t in = cfg.widths[3 - i], out = i < 3 ? cfg.widths[2 - i] : 3;
        convs[i] = nn::Conv2d<T>(params, name + ".conv" + std::to_string(i + 1), in, out, 3, 1, 1, rng);
        if (i < 3) norms[i] = nn::AdaptiveNorm<T>(params, name + ".norm" + std::to_string(i + 1), out, true);
    }
}

template <typename T>
Tensor<T> Decoder<T>::operator()(const Tensor<T>& z) const {
    auto h = ad::reshape(project(z), {z.dim(0), start_channels, start_side, start_side});
    h = ad::relu(h);
    for (std::size_t i = 0; i < 4; ++i) {
        h = convs[i](ad::upsample_nearest(h, 2));
        if (i < 3) h = ad::relu(norms[i](h));
    }
    return ad::sigmoid(h);
}

template <typename T>
Generator<T>::Generator(const GanomalyConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    nn::Rng rng(seed);
    enc1_ = Encoder<T>(params_, "enc1", cfg_, cfg_.stochastic(), rng);
    dec_ = Decoder<T>(params_, "dec", cfg_, rng);
    enc2_ = Encoder<T>(params_, "enc2", cfg_, false, rng);
}

template <typename T>
EdeOutput<T> Generator<T>::forward(const Tensor<T>& x, const Tensor<T>* eps) const {
    if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != cfg_.image_side || x.dim(3) != cfg_.image_side)
        throw ShapeError("GANomaly expects [B,3," + std::to_string(cfg_.image_side) + "," +
                         std::to_string(cfg_.image_side) + "], got " + ad::shape_str(x.shape()));
    EdeOutput<T> out;
    auto e1 = enc1_(x);
    out.mu = e1.mu;
    out.logvar = e1.logvar;
    out.z = e1.mu;
    if (eps && cfg_.stochastic()) {
        if (eps->shape() != e1.mu.shape()) throw ShapeError("eps must match the latent shape");
        out.z = e1.mu + ad::exp(e1.logvar * T(0.5)) * *eps;
    }
    out.x_hat = dec_(out.z);
    out.z_hat = enc2_(out.x_hat).mu;
    return out;
}

template <typename T>
Discriminator<T>::Discriminator(const GanomalyConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    nn::Rng rng(seed);
    GanomalyConfig body = cfg;
    body.latent_dim = 1;
    body_ = Encoder<T>(params_, "disc", body, false, rng);
}

template <typename T>
typename Discriminator<T>::Output Discriminator<T>::forward(const Tensor<T>& x) const {
    std::vector<Tensor<T>> feats;
    auto out = body_(x, &feats);
    return {ad::reshape(out.mu, {x.dim(0)}), feats[2]};
}

// ---- losses ----------------------------------------------------------------

template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& mu, const Tensor<T>& logvar) {
    if (mu.shape() != logvar.shape()) throw ShapeError("mu/logvar shape mismatch");
    auto terms = ad::square(mu) + ad::exp(logvar) - logvar - T(1);
    return ad::mean(terms) * T(0.5);
}

template <typename T>
LossTerms<T> generator_losses(const Tensor<T>& x, const EdeOutput<T>& out, const Tensor<T>& feat_real,
                              const Tensor<T>& feat_fake, const GanomalyConfig& cfg, const Tensor<T>* masked) {
    const auto& w = cfg.weights;
    LossTerms<T> l;
    l.rec = ad::mean(ad::abs(x - out.x_hat));
    l.adv = ad::mean(ad::square(feat_real - feat_fake));
    l.lat = ad::mean(ad::square(out.z - out.z_hat));
    l.total = l.rec * T(w.rec) + l.adv * T(w.adv) + l.lat * T(w.lat);
    if (cfg.stochastic()) {
        if (!out.logvar.defined()) throw ShapeError("KL variant needs a log-variance head");
        l.kl = kl_divergence(out.mu, out.logvar);
        l.total = l.total + l.kl * T(w.kl);
    }
    if (masked) {
        l.mask = *masked;
        l.total = l.total + l.mask * T(w.mask);
    }
    return l;
}

std::size_t p90_count(std::size_t n) { return (n + 9) / 10; }

std::vector<std::uint8_t> p90_select(std::span<const double> values) {
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), 0);
    const std::size_t k = p90_count(values.size());
    std::nth_element(idx.begin(), idx.begin() + std::ptrdiff_t(k), idx.end(), [&](std::size_t a, std::size_t b) {
        return values[a] != values[b] ? values[a] > values[b] : a > b;
    });
    std::vector<std::uint8_t> out(values.size(), 0);
    for (std::size_t i = 0; i < k; ++i) out[idx[i]] = 1;
    return out;
}

template <typename T>
Tensor<T> masked_percentile_loss(const Tensor<T>& x, const Tensor<T>& x_hat, const Tensor<T>& mask) {
    if (x.shape() != x_hat.shape() || x.rank() != 4) throw ShapeError("x and x_hat must be [B,C,H,W]");
    const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (mask.shape() != ad::Shape{b, 1, x.dim(2), x.dim(3)}) throw ShapeError("mask must be [B,1,H,W]");
    std::vector<T> sel(b * hw, T(0));
    const T weight = T(1) / T(double(p90_count(hw) * b));
    std::vector<double> attn(hw);
    for (std::size_t n = 0; n < b; ++n) {
        for (std::size_t p = 0; p < hw; ++p) {
            double s = 0;
            for (std::size_t ch = 0; ch < c; ++ch) s += double(x.data()[(n * c + ch) * hw + p]);
            attn[p] = s * double(mask.data()[n * hw + p]);
        }
        const auto flags = p90_select(attn);
        for (std::size_t p = 0; p < hw; ++p)
            if (flags[p]) sel[n * hw + p] = weight;
    }
    auto selection = Tensor<T>::from(mask.shape(), std::move(sel));
    return ad::sum(ad::abs(x - x_hat) * selection);
}

template <typename T>
DiscriminatorLoss<T> discriminator_objective(const Tensor<T>& real_logits, const Tensor<T>& fake_logits) {
    DiscriminatorLoss<T> l;
    l.real = ad::bce_with_logits(real_logits, std::vector<T>(real_logits.numel(), T(1)));
    l.fake = ad::bce_with_logits(fake_logits, std::vector<T>(fake_logits.numel(), T(0)));
    l.total = l.real + l.fake;
    return l;
}

template <typename T>
DiscriminatorLoss<T> discriminator_loss(const Discriminator<T>& d, const Tensor<T>& x, const Tensor<T>& x_hat) {
    return discriminator_objective(d.forward(x).logits, d.forward(x_hat.detach()).logits);
}

template <typename T>
std::vector<double> latent_scores(const EdeOutput<T>& out) {
    const std::size_t b = out.mu.dim(0), k = out.mu.dim(1);
    std::vector<double> s(b, 0.0);
    for (std::size_t n = 0; n < b; ++n) {
        for (std::size_t j = 0; j < k; ++j) {
            const double d = double(out.mu.data()[n * k + j]) - double(out.z_hat.data()[n * k + j]);
            s[n] += d * d;
        }
        s[n] /= double(k);
    }
    return s;
}

template <typename T>
std::vector<AnomalyRecord> anomaly_score(const Generator<T>& g, const Tensor<T>& x) {
    ad::NoGradGuard guard;
    const auto out = g.forward(x);
    const auto scores = latent_scores(out);
    const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::vector<AnomalyRecord> recs(b);
    for (std::size_t n = 0; n < b; ++n) {
        auto& r = recs[n];
        r.height = h;
        r.width = w;
        r.error_map.assign(h * w, 0.0f);
        std::vector<double> err(h * w, 0.0);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < h * w; ++p) {
                const std::size_t i = (n * c + ch) * h * w + p;
                err[p] += std::abs(double(x.data()[i]) - double(out.x_hat.data()[i]));
            }
        for (std::size_t p = 0; p < h * w; ++p) r.error_map[p] = float(err[p]);
        r.p90_map = p90_select(err);
        r.score = scores[n];
        if (g.config().score_mode == ScoreMode::blended)
            r.score += std::accumulate(err.begin(), err.end(), 0.0) / double(c * h * w);
    }
    return recs;
}

template <typename T>
StepStats<T> train_step(Generator<T>& g, Discriminator<T>& d, optim::Adam<T>& opt_g, optim::Adam<T>& opt_d,
                        const Tensor<T>& x, std::type_identity_t<const Tensor<T>*> masks, std::mt19937_64& rng,
                        double lr) {
    const auto& cfg = g.config();
    StepStats<T> st;
    Tensor<T> eps;
    if (cfg.stochastic()) eps = Tensor<T>::randn({x.dim(0), cfg.latent_dim}, rng);
    auto out = g.forward(x, cfg.stochastic() ? &eps : nullptr);
    auto real = d.forward(x).features.detach();
    auto fake = d.forward(out.x_hat).features;
    Tensor<T> masked;
    const bool use_mask = cfg.variant == Variant::kl_mask;
    if (use_mask) {
        if (!masks) throw ConfigError("kl_mask variant needs attention masks");
        masked = masked_percentile_loss(x, out.x_hat, *masks);
    }
    auto l = generator_losses(x, out, real, fake, cfg, use_mask ? &masked : nullptr);
    l.total.backward();
    opt_g.step(lr);
    g.params().zero_grad();
    d.params().zero_grad();

    auto dl = discriminator_loss(d, x, out.x_hat);
    dl.total.backward();
    opt_d.step(lr);
    d.params().zero_grad();

    st.rec = double(l.rec.item());
    st.adv = double(l.adv.item());
    st.lat = double(l.lat.item());
    st.kl = l.kl.defined() ? double(l.kl.item()) : 0.0;
    st.mask = l.mask.defined() ? double(l.mask.item()) : 0.0;
    st.total = double(l.total.item());
    st.disc = double(dl.total.item());
    return st;
}

#define FUNDUS_INSTANTIATE(T)                                                                               \
    template class Encoder<T>;                                                                              \
    template class Decoder<T>;                                                                              \
    template class Generator<T>;                                                                            \
    template class Discriminator<T>;                                                                        \
    template Tensor<T> kl_divergence(const Tensor<T>&, const Tensor<T>&);                                   \
    template LossTerms<T> generator_losses(const Tensor<T>&, const EdeOutput<T>&, const Tensor<T>&,         \
                                           const Tensor<T>&, const GanomalyConfig&, const Tensor<T>*);      \
    template Tensor<T> masked_percentile_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);        \
    template DiscriminatorLoss<T> discriminator_objective(const Tensor<T>&, const Tensor<T>&);              \
    template DiscriminatorLoss<T> discriminator_loss(const Discriminator<T>&, const Tensor<T>&,             \
                                                     const Tensor<T>&);                                     \
    template std::vector<double> latent_scores(const EdeOutput<T>&);                                        \
    template std::vector<AnomalyRecord> anomaly_score(const Generator<T>&, const Tensor<T>&);               \
    template StepStats<T> train_step(Generator<T>&, Discriminator<T>&, optim::Adam<T>&, optim::Adam<T>&,    \
                                     const Tensor<T>&, const Tensor<T>*, std::mt19937_64&, double);
FUNDUS_INSTANTIATE(float)
FUNDUS_INSTANTIATE(double)
#undef FUNDUS_INSTANTIATE

}  // namespace fundus::ganomaly
