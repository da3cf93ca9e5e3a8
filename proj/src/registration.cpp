#include "episeg/registration.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "episeg/parallel.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace episeg {

void RegistrationConfig::validate() const {
    if (!(ngf_epsilon > 0)) raise(Errc::bad_config, "ngf_epsilon must be > 0");
    if (curvature_weight < 0) raise(Errc::bad_config, "curvature_weight must be >= 0");
    if (pyramid_levels < 1) raise(Errc::bad_config, "pyramid_levels must be >= 1");
    if (max_iterations < 1) raise(Errc::bad_config, "max_iterations must be >= 1");
    if (!(patch_overlap_px > 0 && patch_overlap_px < patch_size_px))
        raise(Errc::bad_config, "need 0 < patch_overlap_px < patch_size_px");
    if (!(merge_data_weight > 0)) raise(Errc::bad_config, "merge_data_weight must be > 0");
}

void DisplacementField::value_at(double px, double py, double& ox, double& oy) const {
    double gx = px / spacing, gy = py / spacing;
    gx = std::clamp(gx, 0.0, static_cast<double>(grid_w - 1));
    gy = std::clamp(gy, 0.0, static_cast<double>(grid_h - 1));
    int x0 = std::min(static_cast<int>(gx), grid_w - 2 >= 0 ? grid_w - 2 : 0);
    int y0 = std::min(static_cast<int>(gy), grid_h - 2 >= 0 ? grid_h - 2 : 0);
    int x1 = std::min(x0 + 1, grid_w - 1), y1 = std::min(y0 + 1, grid_h - 1);
    double fx = gx - x0, fy = gy - y0;
    ox = (1 - fy) * ((1 - fx) * ux(x0, y0) + fx * ux(x1, y0)) +
         fy * ((1 - fx) * ux(x0, y1) + fx * ux(x1, y1));
    oy = (1 - fy) * ((1 - fx) * uy(x0, y0) + fx * uy(x1, y0)) +
         fy * ((1 - fx) * uy(x0, y1) + fx * uy(x1, y1));
}

ImageD to_grayscale(const ImageU8& rgb) {
    ImageD out(rgb.w, rgb.h, 1);
    if (rgb.ch == 1) {
        for (size_t i = 0; i < rgb.pixels(); ++i) out.data[i] = rgb.data[i];
        return out;
    }
    if (rgb.ch != 3) raise(Errc::bad_config, "to_grayscale needs gray or RGB input");
    for (size_t i = 0; i < rgb.pixels(); ++i)
        out.data[i] = 0.299 * rgb.data[i * 3] + 0.587 * rgb.data[i * 3 + 1] +
                      0.114 * rgb.data[i * 3 + 2];
    return out;
}

namespace {

// Central differences, one-sided at borders. Zero when the axis has extent 1.
void image_gradient(const ImageD& img, ImageD& gx, ImageD& gy) {
    int w = img.w, h = img.h;
    gx = ImageD(w, h, 1);
    gy = ImageD(w, h, 1);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (w > 1) {
                if (x == 0)
                    gx.at(x, y) = img.at(1, y) - img.at(0, y);
                else if (x == w - 1)
                    gx.at(x, y) = img.at(w - 1, y) - img.at(w - 2, y);
                else
                    gx.at(x, y) = 0.5 * (img.at(x + 1, y) - img.at(x - 1, y));
            }
            if (h > 1) {
                if (y == 0)
                    gy.at(x, y) = img.at(x, 1) - img.at(x, 0);
                else if (y == h - 1)
                    gy.at(x, y) = img.at(x, h - 1) - img.at(x, h - 2);
                else
                    gy.at(x, y) = 0.5 * (img.at(x, y + 1) - img.at(x, y - 1));
            }
        }
    }
}

// Adjoint of image_gradient: accumulates d(sum_x wx.gx + wy.gy)/d(image).
void gradient_adjoint(const ImageD& wx, const ImageD& wy, ImageD& out) {
    int w = wx.w, h = wx.h;
    out = ImageD(w, h, 1);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double vx = wx.at(x, y);
            if (w > 1 && vx != 0) {
                if (x == 0) {
                    out.at(1, y) += vx;
                    out.at(0, y) -= vx;
                } else if (x == w - 1) {
                    out.at(w - 1, y) += vx;
                    out.at(w - 2, y) -= vx;
                } else {
                    out.at(x + 1, y) += 0.5 * vx;
                    out.at(x - 1, y) -= 0.5 * vx;
                }
            }
            double vy = wy.at(x, y);
            if (h > 1 && vy != 0) {
                if (y == 0) {
                    out.at(x, 1) += vy;
                    out.at(x, 0) -= vy;
                } else if (y == h - 1) {
                    out.at(x, h - 1) += vy;
                    out.at(x, h - 2) -= vy;
                } else {
                    out.at(x, y + 1) += 0.5 * vy;
                    out.at(x, y - 1) -= 0.5 * vy;
                }
            }
        }
    }
}

struct NgfState {
    int w = 0, h = 0;
    double value = 0;
    std::vector<double> q;        // normalized gradient alignment per pixel
    std::vector<double> px, py;   // dq/d(grad T) per pixel
};

// Shared NGF evaluation against precomputed fixed-image gradients.
NgfState ngf_state(const ImageD& rgx, const ImageD& rgy, const ImageD& warped, double eps) {
    NgfState st;
    st.w = warped.w;
    st.h = warped.h;
    size_t n = warped.pixels();
    st.q.resize(n);
    st.px.resize(n);
    st.py.resize(n);
    ImageD tgx, tgy;
    image_gradient(warped, tgx, tgy);
    double e2 = eps * eps;
    double total = 0;
    for (size_t i = 0; i < n; ++i) {
        double tx = tgx.data[i], ty = tgy.data[i];
        double rx = rgx.data[i], ry = rgy.data[i];
        double a = tx * rx + ty * ry + e2;
        double b = tx * tx + ty * ty + e2;
        double c = rx * rx + ry * ry + e2;
        total += 1.0 - (a * a) / (b * c);
        double inv_s = 1.0 / std::sqrt(b * c);
        double ab = a / b;
        st.q[i] = a * inv_s;
        st.px[i] = inv_s * (rx - ab * tx);
        st.py[i] = inv_s * (ry - ab * ty);
    }
    st.value = total;
    return st;
}

// d(value)/d(warped image): scatter -2 q P through the gradient adjoint.
ImageD ngf_image_gradient(const NgfState& st) {
    ImageD wx(st.w, st.h, 1), wy(st.w, st.h, 1);
    for (size_t i = 0; i < st.q.size(); ++i) {
        wx.data[i] = -2.0 * st.q[i] * st.px[i];
        wy.data[i] = -2.0 * st.q[i] * st.py[i];
    }
    ImageD out;
    gradient_adjoint(wx, wy, out);
    return out;
}

// J v for the Gauss-Newton surrogate: per-pixel dq along image perturbation
// delta_w.
std::vector<double> ngf_jv(const NgfState& st, const ImageD& delta_w) {
    ImageD dgx, dgy;
    image_gradient(delta_w, dgx, dgy);
    std::vector<double> out(st.q.size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = st.px[i] * dgx.data[i] + st.py[i] * dgy.data[i];
    return out;
}

// J^T s as an image-space field.
ImageD ngf_jt(const NgfState& st, const std::vector<double>& s) {
    ImageD wx(st.w, st.h, 1), wy(st.w, st.h, 1);
    for (size_t i = 0; i < s.size(); ++i) {
        wx.data[i] = s[i] * st.px[i];
        wy.data[i] = s[i] * st.py[i];
    }
    ImageD out;
    gradient_adjoint(wx, wy, out);
    return out;
}

struct Sampled {
    double v = 0, dx = 0, dy = 0;
};

inline Sampled sample_bilinear(const ImageD& img, double px, double py, double background) {
    if (px < 0 || py < 0 || px > img.w - 1 || py > img.h - 1) return {background, 0, 0};
    int x0 = std::min(static_cast<int>(px), std::max(img.w - 2, 0));
    int y0 = std::min(static_cast<int>(py), std::max(img.h - 2, 0));
    int x1 = std::min(x0 + 1, img.w - 1), y1 = std::min(y0 + 1, img.h - 1);
    double fx = px - x0, fy = py - y0;
    double v00 = img.at(x0, y0), v10 = img.at(x1, y0);
    double v01 = img.at(x0, y1), v11 = img.at(x1, y1);
    Sampled s;
    s.v = (1 - fy) * ((1 - fx) * v00 + fx * v10) + fy * ((1 - fx) * v01 + fx * v11);
    s.dx = (1 - fy) * (v10 - v00) + fy * (v11 - v01);
    s.dy = (1 - fx) * (v01 - v00) + fx * (v11 - v10);
    return s;
}

// Catmull-Rom sampling with analytic derivatives. The solver needs a C^1
// interpolant: bilinear slopes are one-sided on the integer lattice, and a
// zero-initialized field sits exactly there, which kills the line search.
inline void catmull_weights(double t, double* w, double* dw) {
    double t2 = t * t, t3 = t2 * t;
    w[0] = 0.5 * (-t3 + 2 * t2 - t);
    w[1] = 0.5 * (3 * t3 - 5 * t2 + 2);
    w[2] = 0.5 * (-3 * t3 + 4 * t2 + t);
    w[3] = 0.5 * (t3 - t2);
    dw[0] = 0.5 * (-3 * t2 + 4 * t - 1);
    dw[1] = 0.5 * (9 * t2 - 10 * t);
    dw[2] = 0.5 * (-9 * t2 + 8 * t + 1);
    dw[3] = 0.5 * (3 * t2 - 2 * t);
}

inline Sampled sample_cubic(const ImageD& img, double px, double py, double background) {
    if (px < 0 || py < 0 || px > img.w - 1 || py > img.h - 1) return {background, 0, 0};
    int x1 = std::min(static_cast<int>(px), img.w - 1);
    int y1 = std::min(static_cast<int>(py), img.h - 1);
    double fx = px - x1, fy = py - y1;
    double wx[4], dwx[4], wy[4], dwy[4];
    catmull_weights(fx, wx, dwx);
    catmull_weights(fy, wy, dwy);
    double rows[4], drows[4];
    for (int j = 0; j < 4; ++j) {
        int sy = std::clamp(y1 + j - 1, 0, img.h - 1);
        double acc = 0, dacc = 0;
        for (int i = 0; i < 4; ++i) {
            int sx = std::clamp(x1 + i - 1, 0, img.w - 1);
            double v = img.at(sx, sy);
            acc += wx[i] * v;
            dacc += dwx[i] * v;
        }
        rows[j] = acc;
        drows[j] = dacc;
    }
    Sampled s;
    for (int j = 0; j < 4; ++j) {
        s.v += wy[j] * rows[j];
        s.dx += wy[j] * drows[j];
        s.dy += dwy[j] * rows[j];
    }
    return s;
}

// ---- curvature operator -------------------------------------------------
//
// L u = d2x u + d2y u with the second difference taken as zero at nodes
// where the stencil would leave the grid (linear-extrapolation ghosts).
// Affine fields are annihilated exactly, everywhere.

void apply_lap(const std::vector<double>& comp, int w, int h, std::vector<double>& out) {
    out.assign(comp.size(), 0.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            size_t i = static_cast<size_t>(y) * w + x;
            double v = 0;
            if (x >= 1 && x <= w - 2) v += comp[i - 1] + comp[i + 1] - 2 * comp[i];
            if (y >= 1 && y <= h - 2) v += comp[i - w] + comp[i + w] - 2 * comp[i];
            out[i] = v;
        }
    }
}

void apply_lap_transpose(const std::vector<double>& s, int w, int h, std::vector<double>& out) {
    out.assign(s.size(), 0.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            size_t i = static_cast<size_t>(y) * w + x;
            double v = s[i];
            if (v == 0) continue;
            if (x >= 1 && x <= w - 2) {
                out[i - 1] += v;
                out[i + 1] += v;
                out[i] -= 2 * v;
            }
            if (y >= 1 && y <= h - 2) {
                out[i - w] += v;
                out[i + w] += v;
                out[i] -= 2 * v;
            }
        }
    }
}

// value + gradient of S for an interleaved field vector.
double curvature_pieces(const std::vector<double>& u, int w, int h, std::vector<double>* grad) {
    size_t n = static_cast<size_t>(w) * h;
    std::vector<double> comp(n), lap(n), tmp(n);
    if (grad) grad->assign(u.size(), 0.0);
    double value = 0;
    for (int d = 0; d < 2; ++d) {
        for (size_t i = 0; i < n; ++i) comp[i] = u[i * 2 + d];
        apply_lap(comp, w, h, lap);
        for (size_t i = 0; i < n; ++i) value += lap[i] * lap[i];
        if (grad) {
            apply_lap_transpose(lap, w, h, tmp);
            for (size_t i = 0; i < n; ++i) (*grad)[i * 2 + d] = tmp[i];
        }
    }
    return 0.5 * value;
}

// L^T L applied to an interleaved field vector.
void apply_ltl(const std::vector<double>& v, int w, int h, std::vector<double>& out) {
    size_t n = static_cast<size_t>(w) * h;
    out.assign(v.size(), 0.0);
    std::vector<double> comp(n), lap(n), tmp(n);
    for (int d = 0; d < 2; ++d) {
        for (size_t i = 0; i < n; ++i) comp[i] = v[i * 2 + d];
        apply_lap(comp, w, h, lap);
        apply_lap_transpose(lap, w, h, tmp);
        for (size_t i = 0; i < n; ++i) out[i * 2 + d] = tmp[i];
    }
}

double dotv(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

ImageD downsample_d(const ImageD& img) {
    int ow = (img.w + 1) / 2, oh = (img.h + 1) / 2;
    ImageD out(ow, oh, 1);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double sum = 0;
            int n = 0;
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                    int sx = 2 * x + dx, sy = 2 * y + dy;
                    if (sx < img.w && sy < img.h) {
                        sum += img.at(sx, sy);
                        ++n;
                    }
                }
            out.at(x, y) = sum / n;
        }
    return out;
}

void check_finite(double v, const char* what) {
    if (!std::isfinite(v)) raise(Errc::non_finite_objective, what);
}

// ---- multilevel nonparametric solver ------------------------------------

struct LevelProblem {
    const ImageD* fixed;
    const ImageD* moving;
    double moving_ox = 0, moving_oy = 0;  // moving-raster origin in fixed frame
    double eps;
    double alpha;
};

struct WarpState {
    ImageD warped;
    ImageD mgx, mgy;  // interpolant derivative at the sample position
};

WarpState warp_with_grad(const LevelProblem& p, const std::vector<double>& u) {
    int w = p.fixed->w, h = p.fixed->h;
    WarpState ws{ImageD(w, h, 1), ImageD(w, h, 1), ImageD(w, h, 1)};
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            size_t i = static_cast<size_t>(y) * w + x;
            double sx = x + u[i * 2] - p.moving_ox;
            double sy = y + u[i * 2 + 1] - p.moving_oy;
            Sampled s = sample_cubic(*p.moving, sx, sy, 255.0);
            ws.warped.data[i] = s.v;
            ws.mgx.data[i] = s.dx;
            ws.mgy.data[i] = s.dy;
        }
    }
    return ws;
}

double objective_only(const LevelProblem& p, const ImageD& rgx, const ImageD& rgy,
                      const std::vector<double>& u) {
    WarpState ws = warp_with_grad(p, u);
    NgfState st = ngf_state(rgx, rgy, ws.warped, p.eps);
    double s = p.alpha > 0 ? curvature_pieces(u, p.fixed->w, p.fixed->h, nullptr) : 0.0;
    return st.value + p.alpha * s;
}

// One pyramid level of curvature-regularized NGF Gauss-Newton.
void solve_level(const LevelProblem& p, std::vector<double>& u, const RegistrationConfig& cfg,
                 Diagnostics* diag, const std::string& stage, int level) {
    int w = p.fixed->w, h = p.fixed->h;
    size_t n = static_cast<size_t>(w) * h;
    ImageD rgx, rgy;
    image_gradient(*p.fixed, rgx, rgy);

    double grad_tol = cfg.gradient_tolerance * static_cast<double>(n);
    double prev_obj = std::numeric_limits<double>::infinity();
    double lm = 1e-3;  // adaptive Levenberg factor relative to the diagonal

    // coarse levels are cheap; let them converge fully
    int level_iters = std::min(cfg.max_iterations << level, 16 * cfg.max_iterations);

    for (int iter = 0; iter < level_iters; ++iter) {
        WarpState ws = warp_with_grad(p, u);
        NgfState st = ngf_state(rgx, rgy, ws.warped, p.eps);
        std::vector<double> grad_s;
        double s_val = p.alpha > 0 ? curvature_pieces(u, w, h, &grad_s) : 0.0;
        double obj = st.value + p.alpha * s_val;
        check_finite(obj, "registration objective");
        if (obj > prev_obj + 1e-9 * std::abs(prev_obj))
            raise(Errc::diverged, "objective increased across accepted steps");
        prev_obj = obj;

        // gradient
        ImageD img_grad = ngf_image_gradient(st);
        std::vector<double> g(n * 2);
        for (size_t i = 0; i < n; ++i) {
            g[i * 2] = img_grad.data[i] * ws.mgx.data[i];
            g[i * 2 + 1] = img_grad.data[i] * ws.mgy.data[i];
        }
        if (p.alpha > 0)
            for (size_t i = 0; i < g.size(); ++i) g[i] += p.alpha * grad_s[i];
        double gnorm = std::sqrt(dotv(g, g));
        check_finite(gnorm, "registration gradient");
        if (diag) diag->push_back({stage, level, iter, obj, 0.0});
        if (gnorm < grad_tol) break;

        // Levenberg damping scaled to the data-term diagonal. Weakly
        // determined directions (flat image regions, the regularizer's
        // affine nullspace) need a real floor or the Gauss-Newton step
        // explodes there and the line search collapses.
        double diag_mean = 0;
        for (size_t i = 0; i < n; ++i)
            diag_mean += (st.px[i] * st.px[i] + st.py[i] * st.py[i]) *
                         (ws.mgx.data[i] * ws.mgx.data[i] + ws.mgy.data[i] * ws.mgy.data[i]);
        diag_mean = 2.0 * diag_mean / static_cast<double>(n) + p.alpha * 20.0;
        double lambda = std::max(lm * diag_mean, 1e-12);

        auto apply_h = [&](const std::vector<double>& v, std::vector<double>& out) {
            // 2 J^T J v
            ImageD dw(w, h, 1);
            for (size_t i = 0; i < n; ++i)
                dw.data[i] = ws.mgx.data[i] * v[i * 2] + ws.mgy.data[i] * v[i * 2 + 1];
            std::vector<double> jv = ngf_jv(st, dw);
            ImageD jt = ngf_jt(st, jv);
            out.resize(n * 2);
            for (size_t i = 0; i < n; ++i) {
                out[i * 2] = 2.0 * jt.data[i] * ws.mgx.data[i] + lambda * v[i * 2];
                out[i * 2 + 1] = 2.0 * jt.data[i] * ws.mgy.data[i] + lambda * v[i * 2 + 1];
            }
            if (p.alpha > 0) {
                std::vector<double> reg;
                apply_ltl(v, w, h, reg);
                for (size_t i = 0; i < out.size(); ++i) out[i] += p.alpha * reg[i];
            }
        };

        // CG on H delta = -g
        std::vector<double> delta(n * 2, 0.0), r(g), z, pdir, hp;
        for (auto& v : r) v = -v;
        pdir = r;
        double rs = dotv(r, r), rs0 = rs;
        for (int cg = 0; cg < cfg.max_cg_iterations && rs > 1e-4 * rs0; ++cg) {
            apply_h(pdir, hp);
            double denom = dotv(pdir, hp);
            if (!(denom > 0)) break;
            double a = rs / denom;
            for (size_t i = 0; i < delta.size(); ++i) {
                delta[i] += a * pdir[i];
                r[i] -= a * hp[i];
            }
            double rs_new = dotv(r, r);
            double beta = rs_new / rs;
            rs = rs_new;
            for (size_t i = 0; i < pdir.size(); ++i) pdir[i] = r[i] + beta * pdir[i];
        }

        // Trust-region clamp: the linearization is only valid within a
        // pixel or two, and unclamped steps in weakly determined regions
        // would force the line search into geometric collapse.
        double max_step = 0;
        for (size_t i = 0; i < n; ++i)
            max_step = std::max(max_step, std::hypot(delta[i * 2], delta[i * 2 + 1]));
        const double trust_px = 2.0;
        if (max_step > trust_px) {
            double scale = trust_px / max_step;
            for (double& v : delta) v *= scale;
        }

        double gd = dotv(g, delta);
        if (!(gd < 0)) break;  // no descent available

        // Armijo backtracking with Levenberg feedback: full steps relax
        // the damping, crushed steps raise it for the next iteration.
        double step = 1.0;
        bool accepted = false;
        std::vector<double> trial(n * 2);
        for (int bt = 0; bt < 20; ++bt) {
            for (size_t i = 0; i < trial.size(); ++i) trial[i] = u[i] + step * delta[i];
            double trial_obj = objective_only(p, rgx, rgy, trial);
            if (std::isfinite(trial_obj) && trial_obj <= obj + 1e-4 * step * gd) {
                u = trial;
                accepted = true;
                if (diag && !diag->empty()) diag->back().step = step;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;
        if (step >= 1.0)
            lm = std::max(lm * 0.5, 1e-6);
        else if (step <= 0.25)
            lm = std::min(lm * 4.0, 1e2);
    }
}

std::vector<double> restrict_field(const std::vector<double>& u, int w, int h, int cw, int ch) {
    std::vector<double> out(static_cast<size_t>(cw) * ch * 2, 0.0);
    for (int y = 0; y < ch; ++y) {
        for (int x = 0; x < cw; ++x) {
            double sx = 0, sy = 0;
            int cnt = 0;
            for (int dy = 0; dy < 2; ++dy) {
                for (int dx = 0; dx < 2; ++dx) {
                    int fx = 2 * x + dx, fy = 2 * y + dy;
                    if (fx < w && fy < h) {
                        size_t i = (static_cast<size_t>(fy) * w + fx) * 2;
                        sx += u[i];
                        sy += u[i + 1];
                        ++cnt;
                    }
                }
            }
            size_t o = (static_cast<size_t>(y) * cw + x) * 2;
            out[o] = 0.5 * sx / cnt;
            out[o + 1] = 0.5 * sy / cnt;
        }
    }
    return out;
}

std::vector<double> prolong_field(const std::vector<double>& u, int cw, int ch, int fw, int fh) {
    DisplacementField coarse(cw, ch, 1.0);
    coarse.u = u;
    std::vector<double> out(static_cast<size_t>(fw) * fh * 2);
    for (int y = 0; y < fh; ++y) {
        for (int x = 0; x < fw; ++x) {
            double vx, vy;
            coarse.value_at(x / 2.0, y / 2.0, vx, vy);
            size_t i = (static_cast<size_t>(y) * fw + x) * 2;
            out[i] = 2.0 * vx;
            out[i + 1] = 2.0 * vy;
        }
    }
    return out;
}

int feasible_levels(int w, int h, int requested) {
    int levels = 1;
    while (levels < requested && std::min(w, h) >> levels >= 16) ++levels;
    return levels;
}

DisplacementField solve_multilevel(const ImageD& fixed, const ImageD& moving, double moving_ox,
                                   double moving_oy, const DisplacementField& init,
                                   const RegistrationConfig& cfg, Diagnostics* diag,
                                   const std::string& stage) {
    int levels = feasible_levels(fixed.w, fixed.h, cfg.pyramid_levels);

    std::vector<ImageD> fpyr{fixed}, mpyr{moving};
    for (int k = 1; k < levels; ++k) {
        fpyr.push_back(downsample_d(fpyr.back()));
        mpyr.push_back(downsample_d(mpyr.back()));
    }

    // initial field at finest grid
    std::vector<double> u0(static_cast<size_t>(fixed.w) * fixed.h * 2, 0.0);
    if (init.grid_w > 0) {
        DisplacementField src = init;
        for (int y = 0; y < fixed.h; ++y)
            for (int x = 0; x < fixed.w; ++x) {
                size_t i = (static_cast<size_t>(y) * fixed.w + x) * 2;
                src.value_at(x, y, u0[i], u0[i + 1]);
            }
    }
    // restrict to coarsest
    std::vector<std::pair<int, int>> dims{{fixed.w, fixed.h}};
    for (int k = 1; k < levels; ++k) dims.push_back({fpyr[k].w, fpyr[k].h});
    std::vector<double> u = u0;
    for (int k = 1; k < levels; ++k)
        u = restrict_field(u, dims[k - 1].first, dims[k - 1].second, dims[k].first,
                           dims[k].second);

    for (int k = levels - 1; k >= 0; --k) {
        LevelProblem p{&fpyr[k], &mpyr[k], moving_ox / (1 << k), moving_oy / (1 << k),
                       cfg.ngf_epsilon, cfg.curvature_weight};
        solve_level(p, u, cfg, diag, stage, k);
        if (k > 0)
            u = prolong_field(u, dims[k].first, dims[k].second, dims[k - 1].first,
                              dims[k - 1].second);
    }

    DisplacementField out(fixed.w, fixed.h, 1.0);
    out.u = std::move(u);
    return out;
}

void solve6(double a[6][6], double b[6], double x[6]) {
    int idx[6] = {0, 1, 2, 3, 4, 5};
    for (int col = 0; col < 6; ++col) {
        int piv = col;
        for (int r = col + 1; r < 6; ++r)
            if (std::abs(a[idx[r]][col]) > std::abs(a[idx[piv]][col])) piv = r;
        std::swap(idx[col], idx[piv]);
        double d = a[idx[col]][col];
        if (std::abs(d) < 1e-300) raise(Errc::diverged, "singular normal equations");
        for (int r = col + 1; r < 6; ++r) {
            double f = a[idx[r]][col] / d;
            for (int c = col; c < 6; ++c) a[idx[r]][c] -= f * a[idx[col]][c];
            b[idx[r]] -= f * b[idx[col]];
        }
    }
    for (int col = 5; col >= 0; --col) {
        double s = b[idx[col]];
        for (int c = col + 1; c < 6; ++c) s -= a[idx[col]][c] * x[c];
        x[col] = s / a[idx[col]][col];
    }
}

}  // namespace

NgfResult ngf_distance(const ImageD& fixed, const ImageD& warped, double epsilon) {
    if (!fixed.same_shape(warped) || fixed.ch != 1)
        raise(Errc::dimension_mismatch, "ngf_distance needs equally sized gray rasters");
    if (!(epsilon > 0)) raise(Errc::bad_config, "epsilon must be > 0");
    ImageD rgx, rgy;
    image_gradient(fixed, rgx, rgy);
    NgfState st = ngf_state(rgx, rgy, warped, epsilon);
    NgfResult res;
    res.value = st.value;
    res.gradient = ngf_image_gradient(st);
    return res;
}

double ngf_value(const ImageD& fixed, const ImageD& warped, double epsilon) {
    if (!fixed.same_shape(warped) || fixed.ch != 1)
        raise(Errc::dimension_mismatch, "ngf_value needs equally sized gray rasters");
    ImageD rgx, rgy;
    image_gradient(fixed, rgx, rgy);
    return ngf_state(rgx, rgy, warped, epsilon).value;
}

CurvatureResult curvature_energy(const DisplacementField& field) {
    if (field.grid_w < 3 || field.grid_h < 3)
        raise(Errc::grid_too_small, "curvature needs a grid of at least 3x3");
    CurvatureResult res;
    res.value = curvature_pieces(field.u, field.grid_w, field.grid_h, &res.gradient);
    return res;
}

ImageU8 warp_image(const ImageU8& moving, const DisplacementField& field, Interp interp,
                   uint8_t background) {
    if (field.grid_w <= 0 || field.grid_h <= 0)
        raise(Errc::bad_config, "warp_image needs a non-empty field");
    // The field's grid spans the fixed-image domain.
    int out_w = field.spacing == 1.0
                    ? field.grid_w
                    : static_cast<int>(std::lround(field.spacing * (field.grid_w - 1))) + 1;
    int out_h = field.spacing == 1.0
                    ? field.grid_h
                    : static_cast<int>(std::lround(field.spacing * (field.grid_h - 1))) + 1;
    ImageU8 out(out_w, out_h, moving.ch, background);
    for (int y = 0; y < out.h; ++y) {
        for (int x = 0; x < out.w; ++x) {
            double ux, uy;
            field.value_at(x, y, ux, uy);
            double sx = x + ux, sy = y + uy;
            if (sx < 0 || sy < 0 || sx > moving.w - 1 || sy > moving.h - 1) continue;
            if (interp == Interp::nearest) {
                int nx = static_cast<int>(std::lround(sx)), ny = static_cast<int>(std::lround(sy));
                nx = std::clamp(nx, 0, moving.w - 1);
                ny = std::clamp(ny, 0, moving.h - 1);
                for (int c = 0; c < moving.ch; ++c) out.at(x, y, c) = moving.at(nx, ny, c);
            } else {
                int x0 = std::min(static_cast<int>(sx), std::max(moving.w - 2, 0));
                int y0 = std::min(static_cast<int>(sy), std::max(moving.h - 2, 0));
                int x1 = std::min(x0 + 1, moving.w - 1), y1 = std::min(y0 + 1, moving.h - 1);
                double fx = sx - x0, fy = sy - y0;
                for (int c = 0; c < moving.ch; ++c) {
                    double v = (1 - fy) * ((1 - fx) * moving.at(x0, y0, c) + fx * moving.at(x1, y0, c)) +
                               fy * ((1 - fx) * moving.at(x0, y1, c) + fx * moving.at(x1, y1, c));
                    out.at(x, y, c) = clamp_u8(v);
                }
            }
        }
    }
    return out;
}

ImageD warp_image(const ImageD& moving, const DisplacementField& field, double background) {
    if (field.grid_w <= 0 || field.grid_h <= 0)
        raise(Errc::bad_config, "warp_image needs a non-empty field");
    ImageD out(field.grid_w, field.grid_h, 1, background);
    for (int y = 0; y < out.h; ++y) {
        for (int x = 0; x < out.w; ++x) {
            double ux, uy;
            field.value_at(x, y, ux, uy);
            out.at(x, y) = sample_bilinear(moving, x + ux, y + uy, background).v;
        }
    }
    return out;
}

ImageU8 warp_image(const ImageU8& moving, const AffineTransform& t, Interp interp,
                   uint8_t background) {
    return warp_image(moving, field_from_affine(t, moving.w, moving.h), interp, background);
}

ImageU8 warp_mask(const ImageU8& mask, const DisplacementField& field) {
    return warp_image(mask, field, Interp::nearest, 0);
}

DisplacementField field_from_affine(const AffineTransform& t, int w, int h) {
    DisplacementField f(w, h, 1.0);
    double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double dx = x - cx, dy = y - cy;
            f.ux(x, y) = cx + t.a00 * dx + t.a01 * dy + t.tx - x;
            f.uy(x, y) = cy + t.a10 * dx + t.a11 * dy + t.ty - y;
        }
    }
    return f;
}

AffineTransform register_affine(const ImageD& fixed, const ImageD& moving,
                                const RegistrationConfig& cfg, Diagnostics* diag) {
    cfg.validate();
    int levels = feasible_levels(fixed.w, fixed.h, cfg.pyramid_levels);
    std::vector<ImageD> fpyr{fixed}, mpyr{moving};
    for (int k = 1; k < levels; ++k) {
        fpyr.push_back(downsample_d(fpyr.back()));
        mpyr.push_back(downsample_d(mpyr.back()));
    }

    AffineTransform t;
    for (int k = levels - 1; k >= 0; --k) {
        const ImageD& f = fpyr[k];
        const ImageD& m = mpyr[k];
        int w = f.w, h = f.h;
        size_t n = f.pixels();
        double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
        ImageD rgx, rgy, mgx_img, mgy_img;
        image_gradient(f, rgx, rgy);
        image_gradient(m, mgx_img, mgy_img);
        double grad_tol = cfg.gradient_tolerance * static_cast<double>(n);
        double prev_obj = std::numeric_limits<double>::infinity();

        auto warp_params = [&](const AffineTransform& p, WarpState& ws) {
            ws.warped = ImageD(w, h, 1);
            ws.mgx = ImageD(w, h, 1);
            ws.mgy = ImageD(w, h, 1);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double dx = x - cx, dy = y - cy;
                    double sx = cx + p.a00 * dx + p.a01 * dy + p.tx;
                    double sy = cy + p.a10 * dx + p.a11 * dy + p.ty;
                    size_t i = static_cast<size_t>(y) * w + x;
                    ws.warped.data[i] = sample_bilinear(m, sx, sy, 255.0).v;
                    if (sx >= 0 && sy >= 0 && sx <= m.w - 1 && sy <= m.h - 1) {
                        ws.mgx.data[i] = sample_bilinear(mgx_img, sx, sy, 0.0).v;
                        ws.mgy.data[i] = sample_bilinear(mgy_img, sx, sy, 0.0).v;
                    }
                }
        };

        for (int iter = 0; iter < cfg.max_iterations; ++iter) {
            WarpState ws;
            warp_params(t, ws);
            NgfState st = ngf_state(rgx, rgy, ws.warped, cfg.ngf_epsilon);
            check_finite(st.value, "affine objective");
            if (st.value > prev_obj + 1e-9 * std::abs(prev_obj))
                raise(Errc::diverged, "affine objective increased across accepted steps");
            prev_obj = st.value;
            if (diag) diag->push_back({"affine", k, iter, st.value, 0.0});

            // per-pixel dq for the six parameter directions
            std::vector<std::vector<double>> jcols(6);
            {
                ImageD dw(w, h, 1);
                for (int j = 0; j < 6; ++j) {
                    for (int y = 0; y < h; ++y)
                        for (int x = 0; x < w; ++x) {
                            double dx = x - cx, dy = y - cy;
                            double bx = 0, by = 0;
                            switch (j) {
                                case 0: bx = dx; break;
                                case 1: bx = dy; break;
                                case 2: by = dx; break;
                                case 3: by = dy; break;
                                case 4: bx = 1; break;
                                case 5: by = 1; break;
                            }
                            size_t i = static_cast<size_t>(y) * w + x;
                            dw.data[i] = ws.mgx.data[i] * bx + ws.mgy.data[i] * by;
                        }
                    jcols[j] = ngf_jv(st, dw);
                }
            }

            double g[6] = {0, 0, 0, 0, 0, 0};
            double hmat[6][6] = {};
            for (size_t i = 0; i < n; ++i) {
                double qv = st.q[i];
                for (int j = 0; j < 6; ++j) {
                    g[j] += -2.0 * qv * jcols[j][i];
                    for (int l = j; l < 6; ++l) hmat[j][l] += 2.0 * jcols[j][i] * jcols[l][i];
                }
            }
            for (int j = 0; j < 6; ++j)
                for (int l = 0; l < j; ++l) hmat[j][l] = hmat[l][j];
            double gnorm = 0;
            for (double v : g) gnorm += v * v;
            gnorm = std::sqrt(gnorm);
            check_finite(gnorm, "affine gradient");
            if (gnorm < grad_tol) break;
            double lambda = 0;
            for (int j = 0; j < 6; ++j) lambda = std::max(lambda, hmat[j][j]);
            lambda = std::max(lambda * 1e-10, 1e-14);
            for (int j = 0; j < 6; ++j) hmat[j][j] += lambda;

            double nb[6], step_dir[6];
            for (int j = 0; j < 6; ++j) nb[j] = -g[j];
            solve6(hmat, nb, step_dir);
            double gd = 0;
            for (int j = 0; j < 6; ++j) gd += g[j] * step_dir[j];
            if (!(gd < 0)) break;

            double step = 1.0;
            bool accepted = false;
            for (int bt = 0; bt < 20; ++bt) {
                AffineTransform trial = t;
                trial.a00 += step * step_dir[0];
                trial.a01 += step * step_dir[1];
                trial.a10 += step * step_dir[2];
                trial.a11 += step * step_dir[3];
                trial.tx += step * step_dir[4];
                trial.ty += step * step_dir[5];
                if (trial.det() > 0) {
                    WarpState ws_t;
                    warp_params(trial, ws_t);
                    double trial_obj = ngf_state(rgx, rgy, ws_t.warped, cfg.ngf_epsilon).value;
                    if (std::isfinite(trial_obj) && trial_obj <= st.value + 1e-4 * step * gd) {
                        t = trial;
                        accepted = true;
                        if (diag && !diag->empty()) diag->back().step = step;
                        break;
                    }
                }
                step *= 0.5;
            }
            if (!accepted) break;
        }

        if (k > 0) {
            // carry the transform to the next finer level (centers shift by
            // half a pixel between levels; compensate exactly)
            double ccx = (fpyr[k].w - 1) / 2.0, ccy = (fpyr[k].h - 1) / 2.0;
            double cfx = (fpyr[k - 1].w - 1) / 2.0, cfy = (fpyr[k - 1].h - 1) / 2.0;
            double ex = 2 * ccx - cfx, ey = 2 * ccy - cfy;
            double ntx = 2 * t.tx + (ex - (t.a00 * ex + t.a01 * ey));
            double nty = 2 * t.ty + (ey - (t.a10 * ex + t.a11 * ey));
            t.tx = ntx;
            t.ty = nty;
        }
    }
    if (!(t.det() > 0)) raise(Errc::diverged, "affine solution not orientation-preserving");
    return t;
}

DisplacementField register_nonparametric(const ImageD& fixed, const ImageD& moving,
                                         const DisplacementField& init,
                                         const RegistrationConfig& cfg, Diagnostics* diag) {
    cfg.validate();
    if (!(cfg.curvature_weight > 0))
        raise(Errc::bad_config, "nonparametric registration needs curvature_weight > 0");
    return solve_multilevel(fixed, moving, 0, 0, init, cfg, diag, "nonparametric");
}

DisplacementField register_patchwise(const ImageD& fixed, const ImageD& moving,
                                     const DisplacementField& global_field,
                                     const RegistrationConfig& cfg, Diagnostics* diag) {
    cfg.validate();
    if (global_field.grid_w != fixed.w || global_field.grid_h != fixed.h)
        raise(Errc::dimension_mismatch, "global field must cover the fixed image grid");

    int w = fixed.w, h = fixed.h;
    int patch = std::min(cfg.patch_size_px, std::max(w, h));
    int step = patch - cfg.patch_overlap_px;

    auto starts = [&](int extent) {
        std::vector<int> s;
        if (extent <= patch) {
            s.push_back(0);
            return s;
        }
        for (int v = 0;; v += step) {
            if (v + patch >= extent) {
                s.push_back(extent - patch);
                break;
            }
            s.push_back(v);
        }
        return s;
    };
    std::vector<int> xs = starts(w), ys = starts(h);

    double max_disp = 0;
    for (size_t i = 0; i < global_field.u.size(); ++i)
        max_disp = std::max(max_disp, std::abs(global_field.u[i]));
    int margin = static_cast<int>(std::ceil(max_disp)) + 4;

    struct Patch {
        int x0, y0, pw, ph;
        DisplacementField field;
    };
    std::vector<Patch> patches;
    for (int ys_i : ys)
        for (int xs_i : xs)
            patches.push_back({xs_i, ys_i, std::min(patch, w - xs_i), std::min(patch, h - ys_i), {}});

    std::vector<Diagnostics> patch_diag(patches.size());
    parallel_for(patches.size(), cfg.jobs, [&](size_t pi) {
        Patch& pc = patches[pi];
        ImageD fcrop(pc.pw, pc.ph, 1);
        for (int y = 0; y < pc.ph; ++y)
            for (int x = 0; x < pc.pw; ++x) fcrop.at(x, y) = fixed.at(pc.x0 + x, pc.y0 + y);
        int mx0 = std::max(0, pc.x0 - margin), my0 = std::max(0, pc.y0 - margin);
        int mx1 = std::min(w, pc.x0 + pc.pw + margin), my1 = std::min(h, pc.y0 + pc.ph + margin);
        ImageD mcrop(mx1 - mx0, my1 - my0, 1);
        for (int y = my0; y < my1; ++y)
            for (int x = mx0; x < mx1; ++x) mcrop.at(x - mx0, y - my0) = moving.at(x, y);

        DisplacementField init(pc.pw, pc.ph, 1.0);
        for (int y = 0; y < pc.ph; ++y)
            for (int x = 0; x < pc.pw; ++x) {
                init.ux(x, y) = global_field.ux(pc.x0 + x, pc.y0 + y);
                init.uy(x, y) = global_field.uy(pc.x0 + x, pc.y0 + y);
            }
        pc.field = solve_multilevel(fcrop, mcrop, mx0 - pc.x0, my0 - pc.y0, init, cfg,
                                    diag ? &patch_diag[pi] : nullptr,
                                    "patch" + std::to_string(pi));
    });
    if (diag)
        for (auto& d : patch_diag) diag->insert(diag->end(), d.begin(), d.end());

    std::vector<PatchField> fields;
    fields.reserve(patches.size());
    for (Patch& pc : patches) fields.push_back({pc.x0, pc.y0, std::move(pc.field)});
    return merge_patch_fields(w, h, fields, cfg);
}

DisplacementField merge_patch_fields(int w, int h, const std::vector<PatchField>& patches,
                                     const RegistrationConfig& cfg) {
    if (patches.empty()) raise(Errc::empty_input, "merge needs at least one patch");

    // Feathering weight per patch: triangular ramp of width `overlap` from
    // each patch edge, flat 1 in the core; sides flush with the domain
    // boundary count as core. Data term acts where >= 2 patches cover a
    // node; single-coverage nodes keep their patch's value.
    size_t n = static_cast<size_t>(w) * h;
    std::vector<double> weight_sum(n, 0.0), target_x(n, 0.0), target_y(n, 0.0);
    std::vector<int> coverage(n, 0);
    double ramp = cfg.patch_overlap_px;
    for (const PatchField& pc : patches) {
        int pw = pc.field.grid_w, ph = pc.field.grid_h;
        for (int y = 0; y < ph; ++y) {
            for (int x = 0; x < pw; ++x) {
                double dl = pc.x0 == 0 ? 1e9 : x;
                double dr = pc.x0 + pw == w ? 1e9 : pw - 1 - x;
                double dt = pc.y0 == 0 ? 1e9 : y;
                double db = pc.y0 + ph == h ? 1e9 : ph - 1 - y;
                double wx = std::min(1.0, std::min(dl, dr) / ramp);
                double wy = std::min(1.0, std::min(dt, db) / ramp);
                double wgt = std::max(wx * wy, 1e-9);
                size_t i = static_cast<size_t>(pc.y0 + y) * w + (pc.x0 + x);
                weight_sum[i] += wgt;
                target_x[i] += wgt * pc.field.ux(x, y);
                target_y[i] += wgt * pc.field.uy(x, y);
                coverage[i] += 1;
            }
        }
    }

    DisplacementField merged(w, h, 1.0);
    std::vector<char> free_node(n, 0);
    for (size_t i = 0; i < n; ++i) {
        if (weight_sum[i] > 0) {
            target_x[i] /= weight_sum[i];
            target_y[i] /= weight_sum[i];
        }
        merged.u[i * 2] = target_x[i];
        merged.u[i * 2 + 1] = target_y[i];
        free_node[i] = coverage[i] >= 2;
    }
    bool any_free = std::any_of(free_node.begin(), free_node.end(), [](char c) { return c != 0; });
    if (!any_free) return merged;  // single patch: data term only

    double beta = cfg.merge_data_weight, alpha = cfg.curvature_weight;
    // normal equations: (2 beta I + alpha L^T L) u = 2 beta utarget  (free
    // nodes; pinned values enter through the regularizer coupling)
    std::vector<double> pinned(n * 2, 0.0);
    for (size_t i = 0; i < n; ++i)
        if (!free_node[i]) {
            pinned[i * 2] = merged.u[i * 2];
            pinned[i * 2 + 1] = merged.u[i * 2 + 1];
        }
    std::vector<double> rhs(n * 2, 0.0), tmp;
    apply_ltl(pinned, w, h, tmp);
    for (size_t i = 0; i < n; ++i)
        if (free_node[i]) {
            rhs[i * 2] = 2 * beta * target_x[i] - alpha * tmp[i * 2];
            rhs[i * 2 + 1] = 2 * beta * target_y[i] - alpha * tmp[i * 2 + 1];
        }

    auto apply_m = [&](const std::vector<double>& v, std::vector<double>& out) {
        apply_ltl(v, w, h, out);
        for (size_t i = 0; i < n; ++i) {
            if (free_node[i]) {
                out[i * 2] = 2 * beta * v[i * 2] + alpha * out[i * 2];
                out[i * 2 + 1] = 2 * beta * v[i * 2 + 1] + alpha * out[i * 2 + 1];
            } else {
                out[i * 2] = 0;
                out[i * 2 + 1] = 0;
            }
        }
    };

    std::vector<double> x(n * 2, 0.0), r(rhs), pdir, mp;
    for (size_t i = 0; i < n; ++i)
        if (free_node[i]) {
            x[i * 2] = target_x[i];
            x[i * 2 + 1] = target_y[i];
        }
    apply_m(x, mp);
    for (size_t i = 0; i < r.size(); ++i) r[i] -= mp[i];
    pdir = r;
    double rs = dotv(r, r), rs0 = std::max(rs, 1e-30);
    int max_cg = 4 * static_cast<int>(std::sqrt(static_cast<double>(n))) + 200;
    for (int cg = 0; cg < max_cg && rs > 1e-16 * rs0; ++cg) {
        apply_m(pdir, mp);
        double denom = dotv(pdir, mp);
        if (!(denom > 0)) break;
        double a = rs / denom;
        for (size_t i = 0; i < x.size(); ++i) {
            x[i] += a * pdir[i];
            r[i] -= a * mp[i];
        }
        double rs_new = dotv(r, r);
        double b = rs_new / rs;
        rs = rs_new;
        for (size_t i = 0; i < pdir.size(); ++i) pdir[i] = r[i] + b * pdir[i];
    }
    for (size_t i = 0; i < n; ++i)
        if (free_node[i]) {
            merged.u[i * 2] = x[i * 2];
            merged.u[i * 2 + 1] = x[i * 2 + 1];
        }
    return merged;
}

void write_diagnostics_csv(const Diagnostics& diag, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) raise(Errc::io_failure, "cannot write diagnostics: " + path);
    f << "stage,level,iteration,objective,step\n";
    for (const auto& rec : diag)
        f << rec.stage << "," << rec.level << "," << rec.iteration << "," << rec.objective << ","
          << rec.step << "\n";
}

void save_field(const DisplacementField& field, const std::string& dir) {
    fs::create_directories(dir);
    nlohmann::json j;
    j["grid_w"] = field.grid_w;
    j["grid_h"] = field.grid_h;
    j["spacing"] = field.spacing;
    std::ofstream jf(fs::path(dir) / "field.json", std::ios::trunc);
    jf << j.dump(2) << "\n";
    if (!jf) raise(Errc::io_failure, "cannot write field.json under " + dir);

    std::ofstream bf(fs::path(dir) / "field.bin", std::ios::binary | std::ios::trunc);
    std::vector<float> buf(field.u.size());
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(field.u[i]);
    bf.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!bf) raise(Errc::io_failure, "cannot write field.bin under " + dir);
}

DisplacementField load_field(const std::string& dir) {
    std::ifstream jf(fs::path(dir) / "field.json");
    if (!jf) raise(Errc::io_failure, "no field.json in " + dir);
    nlohmann::json j;
    jf >> j;
    DisplacementField f(j.at("grid_w").get<int>(), j.at("grid_h").get<int>(),
                        j.at("spacing").get<double>());
    std::ifstream bf(fs::path(dir) / "field.bin", std::ios::binary);
    if (!bf) raise(Errc::io_failure, "no field.bin in " + dir);
    std::vector<float> buf(f.u.size());
    bf.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (bf.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float)))
        raise(Errc::io_failure, "field.bin truncated in " + dir);
    for (size_t i = 0; i < buf.size(); ++i) f.u[i] = buf[i];
    return f;
}

}  // namespace episeg
