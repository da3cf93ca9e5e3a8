#include "episeg/model.hpp"

#include <cmath>
#include <fstream>

#include "episeg/rng.hpp"
#include "json.hpp"

namespace episeg {

void OptimizerConfig::validate() const {
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
        raise(Errc::bad_config, "betas must lie in [0,1)");
    if (!(learning_rate > 0)) raise(Errc::bad_config, "learning_rate must be > 0");
    if (plateau_patience < 1) raise(Errc::bad_config, "plateau_patience must be >= 1");
}

void adam_step(std::vector<double>& params, const std::vector<double>& grads, AdamState& state,
               const OptimizerConfig& cfg, double lr) {
    if (params.size() != grads.size())
        raise(Errc::dimension_mismatch, "adam_step: parameter/gradient size mismatch");
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
        state.t = 0;
    }
    if (state.m.size() != params.size())
        raise(Errc::dimension_mismatch, "adam_step: state size mismatch");
    for (double g : grads)
        if (!std::isfinite(g)) raise(Errc::non_finite_gradient, "adam_step");

    state.t += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < params.size(); ++i) {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        double mhat = state.m[i] / bc1;
        double vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + cfg.epsilon_hat);
    }
}

PlateauScheduler::PlateauScheduler(double lr0, int patience, double factor)
    : lr_(lr0), patience_(patience), factor_(factor) {
    if (patience < 1) raise(Errc::bad_config, "patience must be >= 1");
}

double PlateauScheduler::observe(double val_loss) {
    if (!std::isfinite(val_loss)) raise(Errc::non_finite_loss, "plateau scheduler input");
    if (val_loss < best_) {
        best_ = val_loss;
        stale_ = 0;
    } else if (++stale_ >= patience_) {
        lr_ *= factor_;
        stale_ = 0;
    }
    return lr_;
}

std::vector<double> plateau_schedule(const std::vector<double>& losses,
                                     const OptimizerConfig& cfg) {
    PlateauScheduler sched(cfg.learning_rate, cfg.plateau_patience, cfg.lr_halving_factor);
    std::vector<double> out;
    out.reserve(losses.size());
    for (double l : losses) out.push_back(sched.observe(l));
    return out;
}

LossResult weighted_ce_loss(const ImageD& logits, const ImageU8& labels, const ImageF& weights) {
    if (logits.ch != 2) raise(Errc::dimension_mismatch, "weighted_ce_loss expects 2 logit channels");
    if (logits.w != labels.w || logits.h != labels.h || labels.ch != 1 ||
        weights.w != labels.w || weights.h != labels.h || weights.ch != 1)
        raise(Errc::dimension_mismatch, "weighted_ce_loss shape mismatch");

    size_t n = labels.pixels();
    LossResult res;
    res.grad_logits = ImageD(logits.w, logits.h, 2);
    double total = 0;
    for (size_t i = 0; i < n; ++i) {
        uint8_t label = labels.data[i];
        if (label > 1) raise(Errc::bad_label_value, "labels must be 0 or 1");
        double w = weights.data[i];
        if (w < 0) raise(Errc::bad_config, "loss weights must be non-negative");
        double z0 = logits.data[i * 2], z1 = logits.data[i * 2 + 1];
        double m = std::max(z0, z1);
        double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
        double s = e0 + e1;
        double p0 = e0 / s, p1 = e1 / s;
        total += w * -std::log(label == 0 ? p0 : p1);
        res.grad_logits.data[i * 2] = w * (p0 - (label == 0 ? 1.0 : 0.0)) / static_cast<double>(n);
        res.grad_logits.data[i * 2 + 1] = w * (p1 - (label == 1 ? 1.0 : 0.0)) / static_cast<double>(n);
    }
    res.value = total / static_cast<double>(n);
    return res;
}

// ---- mini segmenter ------------------------------------------------------

namespace {

struct Tensor {
    int c = 0, h = 0, w = 0;
    std::vector<double> v;
    Tensor() = default;
    Tensor(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(static_cast<size_t>(c_) * h_ * w_, 0.0) {}
    double& at(int ci, int y, int x) { return v[(static_cast<size_t>(ci) * h + y) * w + x]; }
    double at(int ci, int y, int x) const { return v[(static_cast<size_t>(ci) * h + y) * w + x]; }
};

// zero-padded "same" convolution, kernel k in {1,3}
void conv_forward(const Tensor& in, const double* w, const double* b, int out_ch, int k,
                  Tensor& out) {
    out = Tensor(out_ch, in.h, in.w);
    int r = k / 2;
    for (int o = 0; o < out_ch; ++o) {
        for (int y = 0; y < in.h; ++y) {
            for (int x = 0; x < in.w; ++x) {
                double acc = b[o];
                for (int i = 0; i < in.c; ++i) {
                    const double* wk = w + ((static_cast<size_t>(o) * in.c + i) * k * k);
                    for (int dy = 0; dy < k; ++dy) {
                        int sy = y + dy - r;
                        if (sy < 0 || sy >= in.h) continue;
                        for (int dx = 0; dx < k; ++dx) {
                            int sx = x + dx - r;
                            if (sx < 0 || sx >= in.w) continue;
                            acc += wk[dy * k + dx] * in.at(i, sy, sx);
                        }
                    }
                }
                out.at(o, y, x) = acc;
            }
        }
    }
}

void conv_backward(const Tensor& in, const double* w, int out_ch, int k, const Tensor& dout,
                   Tensor& din, double* dw, double* db) {
    din = Tensor(in.c, in.h, in.w);
    int r = k / 2;
    for (int o = 0; o < out_ch; ++o) {
        for (int y = 0; y < in.h; ++y) {
            for (int x = 0; x < in.w; ++x) {
                double g = dout.at(o, y, x);
                if (g == 0) continue;
                db[o] += g;
                for (int i = 0; i < in.c; ++i) {
                    double* dwk = dw + ((static_cast<size_t>(o) * in.c + i) * k * k);
                    const double* wk = w + ((static_cast<size_t>(o) * in.c + i) * k * k);
                    for (int dy = 0; dy < k; ++dy) {
                        int sy = y + dy - r;
                        if (sy < 0 || sy >= in.h) continue;
                        for (int dx = 0; dx < k; ++dx) {
                            int sx = x + dx - r;
                            if (sx < 0 || sx >= in.w) continue;
                            dwk[dy * k + dx] += g * in.at(i, sy, sx);
                            din.at(i, sy, sx) += g * wk[dy * k + dx];
                        }
                    }
                }
            }
        }
    }
}

void relu_inplace(Tensor& t) {
    for (double& v : t.v) v = v > 0 ? v : 0;
}

// post-activation tensor doubles as the mask (act > 0 iff pre > 0)
void relu_backward_inplace(const Tensor& act, Tensor& grad) {
    for (size_t i = 0; i < act.v.size(); ++i)
        if (!(act.v[i] > 0)) grad.v[i] = 0;
}

}  // namespace

struct MiniActivations {
    Tensor x0, a1, a2, pooled, b1, b2, up, cat, d1, d2, logits;
    std::vector<int> pool_arg;  // flat index into a2 per pooled element
};

struct MiniNetOps {
    static const double* block(const MiniSegmenter& net, int idx) {
        return net.params_.data() + net.blocks_[idx].offset;
    }
    static double* gblock(const MiniSegmenter& net, std::vector<double>& g, int idx) {
        return g.data() + net.blocks_[idx].offset;
    }
};

MiniSegmenter::MiniSegmenter(int base_filters, uint64_t init_seed) : f_(base_filters) {
    if (base_filters < 1) raise(Errc::bad_config, "base_filters must be >= 1");
    int f = f_;
    auto add = [&](const std::string& name, size_t size) {
        blocks_.push_back({name, params_.size(), size});
        params_.resize(params_.size() + size, 0.0);
    };
    add("enc1a.w", static_cast<size_t>(f) * 3 * 9);
    add("enc1a.b", f);
    add("enc1b.w", static_cast<size_t>(f) * f * 9);
    add("enc1b.b", f);
    add("bott_a.w", static_cast<size_t>(2 * f) * f * 9);
    add("bott_a.b", 2 * f);
    add("bott_b.w", static_cast<size_t>(2 * f) * (2 * f) * 9);
    add("bott_b.b", 2 * f);
    add("dec_a.w", static_cast<size_t>(f) * (3 * f) * 9);
    add("dec_a.b", f);
    add("dec_b.w", static_cast<size_t>(f) * f * 9);
    add("dec_b.b", f);
    add("head.w", static_cast<size_t>(2) * f);
    add("head.b", 2);

    // He-normal weights; biases get a small jitter so pre-activations do
    // not sit exactly on the ReLU kink at init (keeps finite-difference
    // gradient checks meaningful)
    Rng rng(init_seed);
    for (const auto& blk : blocks_) {
        if (blk.name.ends_with(".b")) {
            for (size_t i = 0; i < blk.size; ++i) params_[blk.offset + i] = 0.02 * rng.normal();
            continue;
        }
        size_t fan_in = blk.name == "enc1a.w" ? 3 * 9
                        : blk.name == "enc1b.w" ? static_cast<size_t>(f) * 9
                        : blk.name == "bott_a.w" ? static_cast<size_t>(f) * 9
                        : blk.name == "bott_b.w" ? static_cast<size_t>(2 * f) * 9
                        : blk.name == "dec_a.w" ? static_cast<size_t>(3 * f) * 9
                        : blk.name == "dec_b.w" ? static_cast<size_t>(f) * 9
                                                 : static_cast<size_t>(f);
        double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (size_t i = 0; i < blk.size; ++i) params_[blk.offset + i] = scale * rng.normal();
    }
}

MiniForward mini_forward(const MiniSegmenter& net, const ImageU8& image) {
    if (image.ch != 3) raise(Errc::bad_input_size, "mini segmenter takes RGB input");
    if (image.w % 2 != 0 || image.h % 2 != 0)
        raise(Errc::bad_input_size, "input spatial dims must be even");
    int f = net.base_filters();
    auto acts = std::make_shared<MiniActivations>();
    MiniActivations& a = *acts;

    a.x0 = Tensor(3, image.h, image.w);
    for (int y = 0; y < image.h; ++y)
        for (int x = 0; x < image.w; ++x)
            for (int c = 0; c < 3; ++c) a.x0.at(c, y, x) = image.at(x, y, c) / 255.0;

    conv_forward(a.x0, MiniNetOps::block(net, 0), MiniNetOps::block(net, 1), f, 3, a.a1);
    relu_inplace(a.a1);
    conv_forward(a.a1, MiniNetOps::block(net, 2), MiniNetOps::block(net, 3), f, 3, a.a2);
    relu_inplace(a.a2);

    int hw = image.w / 2, hh = image.h / 2;
    a.pooled = Tensor(f, hh, hw);
    a.pool_arg.assign(a.pooled.v.size(), 0);
    for (int c = 0; c < f; ++c)
        for (int y = 0; y < hh; ++y)
            for (int x = 0; x < hw; ++x) {
                double best = -1e300;
                int best_idx = 0;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        int sy = 2 * y + dy, sx = 2 * x + dx;
                        double v = a.a2.at(c, sy, sx);
                        if (v > best) {
                            best = v;
                            best_idx = (c * image.h + sy) * image.w + sx;
                        }
                    }
                a.pooled.at(c, y, x) = best;
                a.pool_arg[(static_cast<size_t>(c) * hh + y) * hw + x] = best_idx;
            }

    conv_forward(a.pooled, MiniNetOps::block(net, 4), MiniNetOps::block(net, 5), 2 * f, 3, a.b1);
    relu_inplace(a.b1);
    conv_forward(a.b1, MiniNetOps::block(net, 6), MiniNetOps::block(net, 7), 2 * f, 3, a.b2);
    relu_inplace(a.b2);

    a.up = Tensor(2 * f, image.h, image.w);
    for (int c = 0; c < 2 * f; ++c)
        for (int y = 0; y < image.h; ++y)
            for (int x = 0; x < image.w; ++x) a.up.at(c, y, x) = a.b2.at(c, y / 2, x / 2);

    a.cat = Tensor(3 * f, image.h, image.w);
    std::copy(a.a2.v.begin(), a.a2.v.end(), a.cat.v.begin());
    std::copy(a.up.v.begin(), a.up.v.end(), a.cat.v.begin() + a.a2.v.size());

    conv_forward(a.cat, MiniNetOps::block(net, 8), MiniNetOps::block(net, 9), f, 3, a.d1);
    relu_inplace(a.d1);
    conv_forward(a.d1, MiniNetOps::block(net, 10), MiniNetOps::block(net, 11), f, 3, a.d2);
    relu_inplace(a.d2);
    conv_forward(a.d2, MiniNetOps::block(net, 12), MiniNetOps::block(net, 13), 2, 1, a.logits);

    MiniForward out;
    out.acts = acts;
    out.logits = ImageD(image.w, image.h, 2);
    for (int y = 0; y < image.h; ++y)
        for (int x = 0; x < image.w; ++x) {
            out.logits.at(x, y, 0) = a.logits.at(0, y, x);
            out.logits.at(x, y, 1) = a.logits.at(1, y, x);
        }
    return out;
}

std::vector<double> mini_backward(const MiniSegmenter& net, const MiniForward& fwd,
                                  const ImageD& loss_grad_logits) {
    if (!fwd.acts) raise(Errc::bad_config, "mini_backward needs a forward result");
    const MiniActivations& a = *fwd.acts;
    if (loss_grad_logits.w != a.logits.w || loss_grad_logits.h != a.logits.h ||
        loss_grad_logits.ch != 2)
        raise(Errc::dimension_mismatch, "loss gradient shape mismatch");
    int f = net.base_filters();
    int w = a.logits.w, h = a.logits.h;

    std::vector<double> grads(net.param_count(), 0.0);
    Tensor dlogits(2, h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            dlogits.at(0, y, x) = loss_grad_logits.at(x, y, 0);
            dlogits.at(1, y, x) = loss_grad_logits.at(x, y, 1);
        }

    Tensor dd2;
    conv_backward(a.d2, MiniNetOps::block(net, 12), 2, 1, dlogits, dd2,
                  MiniNetOps::gblock(net, grads, 12), MiniNetOps::gblock(net, grads, 13));
    relu_backward_inplace(a.d2, dd2);
    Tensor dd1;
    conv_backward(a.d1, MiniNetOps::block(net, 10), f, 3, dd2, dd1,
                  MiniNetOps::gblock(net, grads, 10), MiniNetOps::gblock(net, grads, 11));
    relu_backward_inplace(a.d1, dd1);
    Tensor dcat;
    conv_backward(a.cat, MiniNetOps::block(net, 8), f, 3, dd1, dcat,
                  MiniNetOps::gblock(net, grads, 8), MiniNetOps::gblock(net, grads, 9));

    // split concat
    Tensor da2(f, h, w), dup(2 * f, h, w);
    std::copy(dcat.v.begin(), dcat.v.begin() + da2.v.size(), da2.v.begin());
    std::copy(dcat.v.begin() + da2.v.size(), dcat.v.end(), dup.v.begin());

    // nearest-upsample backward: sum over each 2x2 group
    Tensor db2(2 * f, h / 2, w / 2);
    for (int c = 0; c < 2 * f; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) db2.at(c, y / 2, x / 2) += dup.at(c, y, x);

    relu_backward_inplace(a.b2, db2);
    Tensor db1;
    conv_backward(a.b1, MiniNetOps::block(net, 6), 2 * f, 3, db2, db1,
                  MiniNetOps::gblock(net, grads, 6), MiniNetOps::gblock(net, grads, 7));
    relu_backward_inplace(a.b1, db1);
    Tensor dpooled;
    conv_backward(a.pooled, MiniNetOps::block(net, 4), 2 * f, 3, db1, dpooled,
                  MiniNetOps::gblock(net, grads, 4), MiniNetOps::gblock(net, grads, 5));

    // maxpool backward
    for (size_t i = 0; i < dpooled.v.size(); ++i) da2.v[a.pool_arg[i]] += dpooled.v[i];

    relu_backward_inplace(a.a2, da2);
    Tensor da1;
    conv_backward(a.a1, MiniNetOps::block(net, 2), f, 3, da2, da1,
                  MiniNetOps::gblock(net, grads, 2), MiniNetOps::gblock(net, grads, 3));
    relu_backward_inplace(a.a1, da1);
    Tensor dx0;
    conv_backward(a.x0, MiniNetOps::block(net, 0), f, 3, da1, dx0,
                  MiniNetOps::gblock(net, grads, 0), MiniNetOps::gblock(net, grads, 1));
    return grads;
}

ImageU8 predict_mask(const MiniSegmenter& net, const ImageU8& image) {
    // Tiled inference: interiors match whole-image evaluation because the
    // overlap exceeds the receptive-field radius.
    const int tile = 192, overlap = 32;
    int w = image.w, h = image.h;
    // pad to even dims (replicate) so pooling is defined
    ImageU8 padded = image;
    if (w % 2 != 0 || h % 2 != 0) {
        padded = ImageU8(w + w % 2, h + h % 2, image.ch);
        for (int y = 0; y < padded.h; ++y)
            for (int x = 0; x < padded.w; ++x)
                for (int c = 0; c < image.ch; ++c)
                    padded.at(x, y, c) = image.at(std::min(x, w - 1), std::min(y, h - 1), c);
    }

    ImageU8 mask(padded.w, padded.h, 1);
    auto starts = [&](int extent) {
        std::vector<int> s;
        if (extent <= tile) {
            s.push_back(0);
            return s;
        }
        int step = tile - overlap;
        for (int v = 0;; v += step) {
            if (v + tile >= extent) {
                s.push_back(extent - tile);
                break;
            }
            s.push_back(v);
        }
        return s;
    };
    for (int ys : starts(padded.h)) {
        for (int xs : starts(padded.w)) {
            int tw = std::min(tile, padded.w - xs), th = std::min(tile, padded.h - ys);
            if (tw % 2) ++tw;
            if (th % 2) ++th;
            MiniForward fwd = mini_forward(net, padded.crop(xs, ys, tw, th));
            int margin_x0 = xs == 0 ? 0 : overlap / 2;
            int margin_y0 = ys == 0 ? 0 : overlap / 2;
            int margin_x1 = xs + tw >= padded.w ? 0 : overlap / 2;
            int margin_y1 = ys + th >= padded.h ? 0 : overlap / 2;
            for (int y = margin_y0; y < th - margin_y1; ++y)
                for (int x = margin_x0; x < tw - margin_x1; ++x) {
                    double z0 = fwd.logits.at(x, y, 0), z1 = fwd.logits.at(x, y, 1);
                    mask.at(xs + x, ys + y) = z1 > z0 ? 1 : 0;  // ties -> class 0
                }
        }
    }
    return padded.w == w && padded.h == h ? mask : mask.crop(0, 0, w, h);
}

void MiniSegmenter::save(const std::string& path) const {
    nlohmann::json j;
    j["arch"] = "mini_unet2";
    j["base_filters"] = f_;
    j["param_count"] = params_.size();
    std::ofstream fp(path, std::ios::binary | std::ios::trunc);
    if (!fp) raise(Errc::io_failure, "cannot write checkpoint: " + path);
    fp << j.dump() << "\n";
    std::vector<float> blob(params_.begin(), params_.end());
    fp.write(reinterpret_cast<const char*>(blob.data()),
             static_cast<std::streamsize>(blob.size() * sizeof(float)));
    if (!fp) raise(Errc::io_failure, "checkpoint write failed: " + path);
}

MiniSegmenter MiniSegmenter::load(const std::string& path) {
    std::ifstream fp(path, std::ios::binary);
    if (!fp) raise(Errc::io_failure, "cannot open checkpoint: " + path);
    std::string header;
    std::getline(fp, header);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(header);
    } catch (const std::exception& e) {
        raise(Errc::io_failure, std::string("bad checkpoint header: ") + e.what());
    }
    if (j.value("arch", "") != "mini_unet2")
        raise(Errc::bad_config, "unknown checkpoint architecture");
    MiniSegmenter net(j.at("base_filters").get<int>());
    if (j.at("param_count").get<size_t>() != net.param_count())
        raise(Errc::bad_config, "checkpoint parameter count mismatch");
    std::vector<float> blob(net.param_count());
    fp.read(reinterpret_cast<char*>(blob.data()),
            static_cast<std::streamsize>(blob.size() * sizeof(float)));
    if (fp.gcount() != static_cast<std::streamsize>(blob.size() * sizeof(float)))
        raise(Errc::io_failure, "checkpoint blob truncated: " + path);
    for (size_t i = 0; i < blob.size(); ++i) net.params_[i] = blob[i];
    return net;
}

UNetTopology unet_topology(int levels, int base_filters, int input_size) {
    if (levels < 1 || base_filters < 1 || input_size < 1)
        raise(Errc::bad_config, "topology arguments must be positive");
    if (input_size % (1 << (levels - 1)) != 0)
        raise(Errc::indivisible_input,
              "input size must be divisible by 2^(levels-1) = " + std::to_string(1 << (levels - 1)));

    auto filters = [&](int d) { return base_filters * (1 << std::min(d, 3)); };
    auto conv = [](long long cin, long long cout, int k) { return k * k * cin * cout + cout; };
    auto proj = [&](long long cin, long long cout) -> long long {
        return cin == cout ? 0 : cin * cout + cout;  // residual 1x1 where channels change
    };

    UNetTopology t;
    t.levels = levels;
    t.base_filters = base_filters;
    t.input_size = input_size;
    for (int d = 0; d < levels; ++d) {
        UNetLevelInfo info;
        info.depth = d;
        info.spatial = input_size >> d;
        info.filters = filters(d);
        long long in_ch = d == 0 ? 3 : filters(d - 1);
        info.encoder_params =
            conv(in_ch, info.filters, 3) + conv(info.filters, info.filters, 3) + proj(in_ch, info.filters);
        if (d < levels - 1) {
            long long cat_ch = static_cast<long long>(filters(d)) + filters(d + 1);
            info.decoder_params = conv(cat_ch, info.filters, 3) +
                                  conv(info.filters, info.filters, 3) + proj(cat_ch, info.filters);
        }
        t.per_level.push_back(info);
        t.total_params += info.encoder_params + info.decoder_params;
    }
    t.total_params += conv(filters(0), 2, 1);  // head
    return t;
}

TrainResult train(MiniSegmenter& net, const PatchSource& train_stream,
                  const std::vector<PatchBatch>& val_set, const TrainConfig& cfg) {
    cfg.opt.validate();
    if (cfg.epochs < 1 || cfg.steps_per_epoch < 1)
        raise(Errc::bad_config, "epochs and steps_per_epoch must be >= 1");
    if (val_set.empty()) raise(Errc::bad_config, "validation set must not be empty");

    AdamState state;
    PlateauScheduler sched(cfg.opt.learning_rate, cfg.opt.plateau_patience,
                           cfg.opt.lr_halving_factor);
    double lr = cfg.opt.learning_rate;
    TrainResult result;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double train_sum = 0;
        for (int step = 0; step < cfg.steps_per_epoch; ++step) {
            PatchBatch batch = train_stream();
            MiniForward fwd = mini_forward(net, batch.image);
            LossResult loss = weighted_ce_loss(fwd.logits, batch.labels, batch.weights);
            if (!std::isfinite(loss.value))
                raise(Errc::non_finite_loss, "epoch " + std::to_string(epoch) + " step " +
                                                 std::to_string(step));
            std::vector<double> grads = mini_backward(net, fwd, loss.grad_logits);
            adam_step(net.params(), grads, state, cfg.opt, lr);
            train_sum += loss.value;
        }
        double val_sum = 0;
        for (const PatchBatch& vb : val_set) {
            MiniForward fwd = mini_forward(net, vb.image);
            val_sum += weighted_ce_loss(fwd.logits, vb.labels, vb.weights).value;
        }
        double val_loss = val_sum / static_cast<double>(val_set.size());
        if (!std::isfinite(val_loss))
            raise(Errc::non_finite_loss, "validation, epoch " + std::to_string(epoch));
        result.log.push_back({epoch, train_sum / cfg.steps_per_epoch, val_loss, lr});
        lr = sched.observe(val_loss);
    }
    return result;
}

void write_train_log_csv(const std::vector<EpochLog>& log, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) raise(Errc::io_failure, "cannot write training log: " + path);
    f << "epoch,train_loss,val_loss,lr\n";
    f.precision(12);
    for (const auto& e : log)
        f << e.epoch << "," << e.train_loss << "," << e.val_loss << "," << e.lr << "\n";
}

}  // namespace episeg
