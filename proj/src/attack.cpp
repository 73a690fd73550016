#include "patchlab/attack.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "patchlab/optim.hpp"

namespace patchlab::attack {

using policy::ParamLeaves;
using tabletop::geom::kImageSize;

Patch Patch::uniform(int side, double value) {
    Patch p;
    p.pixels = Tensor({side, side, 3}, value);
    p.base = p.pixels;
    return p;
}

std::string method_name(Method m) {
    switch (m) {
        case Method::Trap: return "trap";
        case Method::Random: return "random";
        case Method::ActionOnly: return "action_only";
        case Method::CotOnly: return "cot_only";
    }
    throw ContractError("unknown method");
}

Method method_from_name(const std::string& name) {
    if (name == "trap") return Method::Trap;
    if (name == "random") return Method::Random;
    if (name == "action_only") return Method::ActionOnly;
    if (name == "cot_only") return Method::CotOnly;
    throw ConfigError("unknown attack method: " + name);
}

void AttackConfig::validate() const {
    if (epsilon <= 0.0) throw ConfigError("attack epsilon must be positive");
    if (eta < 0.0) throw ConfigError("attack eta must be non-negative");
    if (epochs < 1) throw ConfigError("attack epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("attack batch_size must be >= 1");
    if (patch_fraction <= 0.0 || patch_fraction > 0.5) {
        throw ConfigError("patch_fraction must lie in (0, 0.5]");
    }
    if (eot.scale_lo > eot.scale_hi || eot.scale_lo <= 0.0) {
        throw ConfigError("invalid EoT scale range");
    }
}

Homography base_patch_homography(int patch_side, double fraction) {
    const int region = static_cast<int>(std::lround(kImageSize * fraction));
    const double cx = tabletop::geom::kPatchCenterX * tabletop::geom::kPxPerUnit;
    const double cy = tabletop::geom::kPatchCenterY * tabletop::geom::kPxPerUnit;
    const double x0 = cx - region / 2.0;
    const double y0 = cy - region / 2.0;
    return Homography::rect_to_rect(patch_side, patch_side, x0, y0, region, region);
}

Homography sample_transform(const EotConfig& eot, const Homography& base, int patch_side,
                            Rng& rng) {
    for (int attempt = 0; attempt < 16; ++attempt) {
        const double theta = rng.uniform(-eot.rotation_deg, eot.rotation_deg) * M_PI / 180.0;
        const double s = rng.uniform(eot.scale_lo, eot.scale_hi);
        const double tx = rng.uniform(-eot.translate_px, eot.translate_px);
        const double ty = rng.uniform(-eot.translate_px, eot.translate_px);
        const double p1 = rng.uniform(-eot.perspective, eot.perspective);
        const double p2 = rng.uniform(-eot.perspective, eot.perspective);

        const double c = (patch_side - 1) / 2.0;
        Homography rot;
        rot.m = {std::cos(theta) * s, -std::sin(theta) * s, 0.0,
                 std::sin(theta) * s, std::cos(theta) * s,  0.0,
                 p1,                  p2,                   1.0};
        Homography jitter = compose(Homography::translation(c, c),
                                    compose(rot, Homography::translation(-c, -c)));
        Homography h = compose(Homography::translation(tx, ty), compose(base, jitter));
        if (std::abs(h.det()) > 1e-9) return h;
    }
    throw GeometryError("could not sample a non-singular transform");
}

diffcore::SampleGrid make_sample_grid(const Homography& h, int patch_h, int patch_w,
                                      int canvas_h, int canvas_w) {
    const Homography inv = h.inverse();
    diffcore::SampleGrid grid;
    grid.out_h = canvas_h;
    grid.out_w = canvas_w;
    grid.src_h = patch_h;
    grid.src_w = patch_w;
    const std::size_t n = static_cast<std::size_t>(canvas_h) * canvas_w;
    grid.u.assign(n, 0.0);
    grid.v.assign(n, 0.0);
    grid.inside.assign(n, 0);
    for (int y = 0; y < canvas_h; ++y) {
        for (int x = 0; x < canvas_w; ++x) {
            double u = 0.0, v = 0.0;
            inv.apply(static_cast<double>(x), static_cast<double>(y), u, v);
            const std::size_t i = static_cast<std::size_t>(y) * canvas_w + x;
            if (u >= 0.0 && u <= patch_w - 1.0 && v >= 0.0 && v <= patch_h - 1.0) {
                grid.u[i] = u;
                grid.v[i] = v;
                grid.inside[i] = 1;
            }
        }
    }
    return grid;
}

std::pair<TensorPtr, PatchMask> warp_patch(Graph& g, const TensorPtr& patch, const Homography& h,
                                           int canvas_h, int canvas_w) {
    if (std::abs(h.det()) <= 1e-9) throw GeometryError("warp_patch: singular homography");
    const int ph = patch->shape()[0], pw = patch->shape()[1];
    diffcore::SampleGrid grid = make_sample_grid(h, ph, pw, canvas_h, canvas_w);
    PatchMask mask;
    mask.mask = Tensor({canvas_h, canvas_w});
    for (std::size_t i = 0; i < grid.inside.size(); ++i) {
        mask.mask[i] = grid.inside[i] ? 1.0 : 0.0;
    }
    return {g.bilinear_sample(patch, grid), std::move(mask)};
}

TensorPtr composite(Graph& g, const TensorPtr& obs, const TensorPtr& patch_image,
                    const PatchMask& mask) {
    if (!obs->same_shape(*patch_image)) {
        throw DimensionError("composite: observation and patch image shapes differ");
    }
    const int h = obs->shape()[0], w = obs->shape()[1];
    if (mask.mask.shape() != std::vector<int>{h, w}) {
        throw DimensionError("composite: mask shape mismatch");
    }
    Tensor m3({h, w, 3}), inv3({h, w, 3});
    for (std::size_t i = 0; i < mask.mask.size(); ++i) {
        for (int c = 0; c < 3; ++c) {
            m3[i * 3 + c] = mask.mask[i];
            inv3[i * 3 + c] = 1.0 - mask.mask[i];
        }
    }
    return g.add(g.mul(obs, g.leaf(std::move(inv3))), g.mul(patch_image, g.leaf(std::move(m3))));
}

TensorPtr tv_loss(Graph& g, const TensorPtr& patch) { return g.tv(patch); }

TensorPtr cot_hijack_loss(Graph& g, const ParamLeaves& pl, const TensorPtr& adv_obs,
                          const Instruction& instr, const CoT& target_cot) {
    return policy::cot_nll(g, pl, adv_obs, instr, target_cot, false);
}

TensorPtr action_loss_discrete(Graph& g, const ParamLeaves& pl, const TensorPtr& adv_obs,
                               const CoT& target_cot, const Instruction& instr,
                               int target_action) {
    if (pl.cfg->head_kind != tabletop::Action::Kind::Discrete) {
        throw HeadKindError("action_loss_discrete requires a discrete-head policy");
    }
    policy::TrunkOptions opts;
    auto raw = policy::action_readout(g, pl, adv_obs, instr, target_cot, opts);
    return g.softmax_cross_entropy(raw, target_action);
}

TensorPtr action_loss_continuous(Graph& g, const ParamLeaves& pl, const TensorPtr& adv_obs,
                                 const CoT& target_cot, const Instruction& instr,
                                 const policy::Trajectory& target_waypoints,
                                 tabletop::Vec2 gripper) {
    if (pl.cfg->head_kind != tabletop::Action::Kind::Continuous) {
        throw HeadKindError("action_loss_continuous requires a continuous-head policy");
    }
    policy::TrunkOptions opts;
    auto raw = policy::action_readout(g, pl, adv_obs, instr, target_cot, opts);
    auto pred = policy::waypoints_from_raw(g, raw, pl.cfg->chunk_len, gripper);
    // Horizon mismatch: truncate to the shorter side.
    const int k = std::min<int>(pl.cfg->chunk_len, static_cast<int>(target_waypoints.size()));
    if (k == 0) throw ContractError("action_loss_continuous: empty target trajectory");
    if (k < pl.cfg->chunk_len) {
        Tensor sel({k, pl.cfg->chunk_len});
        for (int i = 0; i < k; ++i) sel.at(i, i) = 1.0;
        pred = g.matmul(g.leaf(std::move(sel)), pred);
    }
    Tensor target({k, 2});
    for (int i = 0; i < k; ++i) {
        target.at(i, 0) = target_waypoints[static_cast<std::size_t>(i)].x;
        target.at(i, 1) = target_waypoints[static_cast<std::size_t>(i)].y;
    }
    return g.scale(g.squared_error(pred, g.leaf(std::move(target))), 1.0 / k);
}

PatchApplicator::PatchApplicator(const Patch& patch, const Homography& h, int canvas_h,
                                 int canvas_w) {
    Graph g;
    auto [warped, mask] = warp_patch(g, g.leaf(patch.pixels), h, canvas_h, canvas_w);
    warped_ = *warped;
    mask_ = std::move(mask);
}

Observation PatchApplicator::apply(const Observation& obs) const {
    if (!obs.same_shape(warped_)) throw DimensionError("apply: observation shape mismatch");
    Observation out = obs;
    for (std::size_t i = 0; i < mask_.mask.size(); ++i) {
        if (mask_.mask[i] == 1.0) {
            for (int c = 0; c < 3; ++c) out[i * 3 + c] = warped_[i * 3 + c];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Color calibration
// ---------------------------------------------------------------------------

ColorCalibrator ColorCalibrator::init(std::uint64_t seed) {
    Rng rng(derive_seed(seed, "calibrator-init"));
    auto gauss = [&rng](std::vector<int> shape, double std) {
        Tensor t(std::move(shape));
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, std);
        return t;
    };
    ColorCalibrator net;
    net.w1 = gauss({3, 16}, 1.0 / std::sqrt(3.0));
    net.b1 = Tensor({1, 16});
    net.w2 = gauss({16, 16}, 0.25);
    net.b2 = Tensor({1, 16});
    net.w3 = gauss({16, 3}, 0.25);
    net.b3 = Tensor({1, 3});
    return net;
}

namespace {

// Shared forward: rows of RGB through the 3->16->16->3 stack, clamped.
TensorPtr calibrator_forward(Graph& g, const ColorCalibrator& net, const TensorPtr& x, int rows,
                             bool train_mode, std::vector<TensorPtr>* leaves_out) {
    auto enter = [&](const Tensor& t) {
        if (train_mode) {
            auto leaf = g.leaf(t, true);
            leaves_out->push_back(leaf);
            return leaf;
        }
        return g.leaf_shared(TensorPtr(TensorPtr(), const_cast<Tensor*>(&t)));
    };
    auto w1 = enter(net.w1), b1 = enter(net.b1), w2 = enter(net.w2), b2 = enter(net.b2),
         w3 = enter(net.w3), b3 = enter(net.b3);
    const std::vector<int> zeros(static_cast<std::size_t>(rows), 0);
    auto bias_rows = [&](const TensorPtr& b) { return g.embedding_lookup(b, zeros); };
    auto h1 = g.leaky_relu(g.add(g.matmul(x, w1), bias_rows(b1)), net.leaky_slope);
    auto h2 = g.leaky_relu(g.add(g.matmul(h1, w2), bias_rows(b2)), net.leaky_slope);
    auto out = g.add(g.matmul(h2, w3), bias_rows(b3));
    return g.clamp(out, 0.0, 1.0);
}

}  // namespace

std::array<double, 3> ColorCalibrator::apply(const std::array<double, 3>& rgb) const {
    Graph g;
    auto x = g.leaf(Tensor({1, 3}, {rgb[0], rgb[1], rgb[2]}));
    auto y = calibrator_forward(g, *this, x, 1, false, nullptr);
    return {(*y)[0], (*y)[1], (*y)[2]};
}

TensorPtr apply_calibrator(Graph& g, const ColorCalibrator& net, const TensorPtr& patch) {
    const int h = patch->shape()[0], w = patch->shape()[1];
    auto rows = g.reshape(patch, {h * w, 3});
    auto out = calibrator_forward(g, net, rows, h * w, false, nullptr);
    return g.reshape(out, {h, w, 3});
}

CalibratorFit fit_color_calibrator(const std::vector<ColorPair>& pairs,
                                   const CalibratorFitConfig& cfg) {
    if (pairs.size() < 64) {
        throw ContractError("fit_color_calibrator needs at least 64 pairs, got " +
                            std::to_string(pairs.size()));
    }
    CalibratorFit fit;
    fit.degenerate_warning = true;
    for (const auto& p : pairs) {
        if (p.first != pairs[0].first || p.second != pairs[0].second) {
            fit.degenerate_warning = false;
            break;
        }
    }

    Rng rng(derive_seed(cfg.seed, "calibrator-fit"));
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    const std::size_t holdout =
        std::max<std::size_t>(1, static_cast<std::size_t>(cfg.holdout_fraction * pairs.size()));
    std::vector<std::size_t> test(order.begin(), order.begin() + static_cast<long>(holdout));
    std::vector<std::size_t> train(order.begin() + static_cast<long>(holdout), order.end());

    fit.net = ColorCalibrator::init(cfg.seed);
    std::vector<Tensor*> refs{&fit.net.w1, &fit.net.b1, &fit.net.w2,
                              &fit.net.b2, &fit.net.w3, &fit.net.b3};
    Adam adam(cfg.lr);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(train);
        for (std::size_t b0 = 0; b0 < train.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t b1 = std::min(train.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
            const int rows = static_cast<int>(b1 - b0);
            Tensor x({rows, 3}), y({rows, 3});
            for (int r = 0; r < rows; ++r) {
                for (int c = 0; c < 3; ++c) {
                    x.at(r, c) = pairs[train[b0 + static_cast<std::size_t>(r)]].first[static_cast<std::size_t>(c)];
                    y.at(r, c) = pairs[train[b0 + static_cast<std::size_t>(r)]].second[static_cast<std::size_t>(c)];
                }
            }
            Graph g;
            std::vector<TensorPtr> leaves;
            auto pred = calibrator_forward(g, fit.net, g.leaf(std::move(x)), rows, true, &leaves);
            auto loss = g.scale(g.squared_error(pred, g.leaf(std::move(y))),
                                1.0 / static_cast<double>(rows * 3));
            g.backward(loss);
            std::vector<std::vector<double>> grads;
            grads.reserve(leaves.size());
            for (const auto& leaf : leaves) grads.push_back(leaf->grad);
            adam.step(refs, grads);
        }
    }

    double se = 0.0;
    for (const std::size_t i : test) {
        const auto pred = fit.net.apply(pairs[i].first);
        for (int c = 0; c < 3; ++c) {
            const double d = pred[static_cast<std::size_t>(c)] - pairs[i].second[static_cast<std::size_t>(c)];
            se += d * d;
        }
    }
    fit.holdout_rmse = std::sqrt(se / (static_cast<double>(test.size()) * 3.0));
    return fit;
}

// ---------------------------------------------------------------------------
// Patch optimization
// ---------------------------------------------------------------------------

namespace {

struct SampleLosses {
    double cot = 0.0, action = 0.0, tv = 0.0, total = 0.0;
};

// Loss and patch gradient for one sample under one sampled transform.
SampleLosses sample_loss_and_grad(const AttackSample& sample, const Instruction& instr,
                                  const policy::PolicyParams& params, const AttackConfig& cfg,
                                  const Tensor& patch_pixels, const Homography& h,
                                  const ColorCalibrator* calibrator, std::vector<double>* grad_out) {
    Graph g;
    ParamLeaves pl = policy::make_param_leaves(g, params, false);
    auto patch_leaf = g.leaf(patch_pixels, true);
    TensorPtr physical = patch_leaf;
    if (calibrator) physical = apply_calibrator(g, *calibrator, physical);
    auto [warped, mask] = warp_patch(g, physical, h, kImageSize, kImageSize);
    auto obs = g.leaf_shared(TensorPtr(TensorPtr(), const_cast<Observation*>(&sample.obs)));
    auto adv = composite(g, obs, warped, mask);

    // One trunk serves both the teacher-forced reasoning loss and the action
    // readout; causal masking keeps the per-position logits unchanged.
    policy::TrunkOptions opts;
    opts.include_act = true;
    policy::TrunkOut trunk = build_trunk(g, pl, adv, instr, sample.target_cot.tokens, opts);

    SampleLosses out;
    TensorPtr loss;
    if (cfg.method != Method::ActionOnly) {
        TensorPtr cot_term;
        for (std::size_t t = 0; t < sample.target_cot.tokens.size(); ++t) {
            Tensor sel({1, trunk.seq_len});
            sel.at(0, trunk.bos_row + static_cast<int>(t)) = 1.0;
            auto logits = g.matmul(g.matmul(g.leaf(std::move(sel)), trunk.hidden), pl.cot_head);
            auto term = g.softmax_cross_entropy(logits, sample.target_cot.tokens[t]);
            cot_term = cot_term ? g.add(cot_term, term) : term;
        }
        out.cot = (*cot_term)[0];
        loss = cot_term;
    }
    if (cfg.method != Method::CotOnly) {
        Tensor sel({1, trunk.seq_len});
        sel.at(0, trunk.act_row) = 1.0;
        auto raw = g.matmul(g.matmul(g.leaf(std::move(sel)), trunk.hidden), pl.act_head);
        TensorPtr act_term;
        if (params.cfg.head_kind == tabletop::Action::Kind::Discrete) {
            act_term = g.softmax_cross_entropy(raw, sample.target_disc);
        } else {
            auto pred = policy::waypoints_from_raw(g, raw, params.cfg.chunk_len, sample.gripper);
            const int k = std::min<int>(params.cfg.chunk_len,
                                        static_cast<int>(sample.target_waypoints.size()));
            if (k < params.cfg.chunk_len) {
                Tensor tsel({k, params.cfg.chunk_len});
                for (int i = 0; i < k; ++i) tsel.at(i, i) = 1.0;
                pred = g.matmul(g.leaf(std::move(tsel)), pred);
            }
            Tensor target({k, 2});
            for (int i = 0; i < k; ++i) {
                target.at(i, 0) = sample.target_waypoints[static_cast<std::size_t>(i)].x;
                target.at(i, 1) = sample.target_waypoints[static_cast<std::size_t>(i)].y;
            }
            act_term = g.scale(g.squared_error(pred, g.leaf(std::move(target))), 1.0 / k);
        }
        out.action = (*act_term)[0];
        auto weighted = g.scale(act_term, cfg.lambda_action);
        loss = loss ? g.add(loss, weighted) : weighted;
    }
    if (cfg.tv_weight != 0.0) {
        auto tv_term = g.tv(patch_leaf);
        out.tv = (*tv_term)[0];
        loss = loss ? g.add(loss, g.scale(tv_term, cfg.tv_weight)) : g.scale(tv_term, cfg.tv_weight);
    }
    out.total = (*loss)[0];
    g.backward(loss);
    *grad_out = patch_leaf->grad;
    return out;
}

}  // namespace

OptimizeResult optimize_patch(const std::vector<AttackSample>& samples,
                              const policy::PolicyParams& params, const AttackConfig& cfg,
                              Exec exec, const std::vector<Instruction>* instruction_pool,
                              const ColorCalibrator* calibrator) {
    cfg.validate();
    OptimizeResult result;
    result.patch = Patch::uniform(kPatchSide, 0.5);
    Rng rng(derive_seed(cfg.seed, "attack"));

    if (cfg.method == Method::Random) {
        // Noise within the same budget, no optimization.
        for (std::size_t i = 0; i < result.patch.pixels.size(); ++i) {
            result.patch.pixels[i] = std::clamp(
                result.patch.base[i] + rng.uniform(-cfg.epsilon, cfg.epsilon), 0.0, 1.0);
        }
        return result;
    }
    if (samples.empty()) throw ContractError("optimize_patch: no samples");

    const Homography base_h = base_patch_homography(kPatchSide, cfg.patch_fraction);
    Tensor& pixels = result.patch.pixels;
    const Tensor& base = result.patch.base;
    Tensor last_finite = pixels;

    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    double best_total = 0.0;
    int stale_epochs = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        LossRow row;
        row.epoch = epoch;
        std::size_t counted = 0;
        bool abort = false;
        for (std::size_t b0 = 0; b0 < order.size() && !abort;
             b0 += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t b1 =
                std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
            const std::size_t bsz = b1 - b0;
            // Transforms and pool draws are sampled serially so parallel and
            // serial execution see identical work items.
            std::vector<Homography> hs(bsz);
            std::vector<const Instruction*> instrs(bsz);
            for (std::size_t i = 0; i < bsz; ++i) {
                hs[i] = sample_transform(cfg.eot, base_h, kPatchSide, rng);
                const AttackSample& s = samples[order[b0 + i]];
                instrs[i] = instruction_pool && !instruction_pool->empty()
                                ? &(*instruction_pool)[rng.uniform_index(instruction_pool->size())]
                                : &s.instr;
            }
            std::vector<std::vector<double>> grads(bsz);
            std::vector<SampleLosses> losses(bsz);
            for_each_index(exec, bsz, [&](std::size_t i) {
                losses[i] = sample_loss_and_grad(samples[order[b0 + i]], *instrs[i], params, cfg,
                                                 pixels, hs[i], calibrator, &grads[i]);
            });
            double batch_total = 0.0;
            for (const auto& l : losses) batch_total += l.total;
            if (!std::isfinite(batch_total)) {
                result.aborted_non_finite = true;
                pixels = last_finite;
                abort = true;
                break;
            }
            last_finite = pixels;
            for (std::size_t i = 0; i < bsz; ++i) {
                row.l_cot += losses[i].cot;
                row.l_action += losses[i].action;
                row.l_tv += losses[i].tv;
                row.total += losses[i].total;
            }
            counted += bsz;

            const double inv = 1.0 / static_cast<double>(bsz);
            for (std::size_t j = 0; j < pixels.size(); ++j) {
                double gsum = 0.0;
                for (std::size_t i = 0; i < bsz; ++i) gsum += grads[i][j];
                const double gmean = gsum * inv;
                const double step =
                    cfg.sign_step ? (gmean > 0.0 ? 1.0 : (gmean < 0.0 ? -1.0 : 0.0)) : gmean;
                double v = pixels[j] - cfg.eta * step;
                v = std::clamp(v, base[j] - cfg.epsilon, base[j] + cfg.epsilon);
                pixels[j] = std::clamp(v, 0.0, 1.0);
            }
            // In-loop budget audit after every projected step.
            for (std::size_t j = 0; j < pixels.size(); ++j) {
                const double excess = std::abs(pixels[j] - base[j]) - cfg.epsilon;
                if (excess > result.max_budget_violation) result.max_budget_violation = excess;
                const double range = std::max(-pixels[j], pixels[j] - 1.0);
                if (range > result.max_range_violation) result.max_range_violation = range;
            }
        }
        if (counted == 0) break;
        row.l_cot /= static_cast<double>(counted);
        row.l_action /= static_cast<double>(counted);
        row.l_tv /= static_cast<double>(counted);
        row.total /= static_cast<double>(counted);
        result.trace.push_back(row);
        result.epochs_run = epoch + 1;
        if (abort) break;

        if (epoch == 0 || row.total < best_total - 1e-9) {
            best_total = epoch == 0 ? row.total : std::min(best_total, row.total);
            stale_epochs = 0;
        } else if (++stale_epochs >= cfg.plateau_patience) {
            break;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Patch files (binary PPM, 8-bit)
// ---------------------------------------------------------------------------

void export_patch(const Patch& patch, const std::filesystem::path& path) {
    const int h = patch.pixels.shape()[0], w = patch.pixels.shape()[1];
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open for writing: " + path.string());
    out << "P6\n" << w << ' ' << h << "\n255\n";
    std::vector<unsigned char> bytes(patch.pixels.size());
    for (std::size_t i = 0; i < patch.pixels.size(); ++i) {
        // Round half away from zero; values are clamped to [0,1] first.
        const double v = std::clamp(patch.pixels[i], 0.0, 1.0) * 255.0;
        bytes[i] = static_cast<unsigned char>(std::floor(v + 0.5));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<long>(bytes.size()));
    if (!out) throw FormatError("write failed: " + path.string());
}

Patch import_patch(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open: " + path.string());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) {
        throw FormatError("not an 8-bit binary PPM: " + path.string());
    }
    in.get();  // single whitespace after header
    std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<long>(bytes.size()));
    if (in.gcount() != static_cast<long>(bytes.size())) {
        throw FormatError("truncated PPM at byte offset " +
                          std::to_string(static_cast<long>(in.tellg()) < 0
                                             ? bytes.size() - static_cast<std::size_t>(in.gcount())
                                             : static_cast<std::size_t>(in.tellg())) +
                          " in " + path.string());
    }
    Patch patch;
    patch.pixels = Tensor({h, w, 3});
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        patch.pixels[i] = static_cast<double>(bytes[i]) / 255.0;
    }
    patch.base = patch.pixels;
    return patch;
}

}  // namespace patchlab::attack
