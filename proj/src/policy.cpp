#include "patchlab/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "patchlab/optim.hpp"
#include "patchlab/rng.hpp"

namespace patchlab::policy {

using tabletop::tok::VOCAB_SIZE;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

PolicyParams PolicyParams::init(const PolicyConfig& cfg, std::uint64_t seed) {
    if (cfg.d_model % cfg.n_heads != 0) throw ContractError("d_model must divide into heads");
    Rng rng(derive_seed(seed, "policy-init"));
    auto gauss = [&rng](std::vector<int> shape, double std) {
        Tensor t(std::move(shape));
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, std);
        return t;
    };
    const int d = cfg.d_model, dh = cfg.d_head(), hid = cfg.mlp_hidden;
    PolicyParams p;
    p.cfg = cfg;
    p.embed = gauss({VOCAB_SIZE, d}, 0.5);
    p.pos = gauss({seq::MAX_SEQ, d}, 0.5);
    // Structured starting point for spatial codes: image-token positions get
    // a smooth 2D coordinate basis and bin tokens a 1D one, so relational
    // readouts (offsets between locations) do not have to invent a
    // coordinate system from random init. Everything stays learnable.
    {
        const int grid = tabletop::geom::kImageSize / seq::BLOCK;
        for (int gy = 0; gy < grid; ++gy) {
            for (int gx = 0; gx < grid; ++gx) {
                double* row = p.pos.data() + static_cast<std::size_t>(gy * grid + gx) * d;
                const double fx = static_cast<double>(gx) / (grid - 1);
                const double fy = static_cast<double>(gy) / (grid - 1);
                row[0] = 2.0 * fx - 1.0;
                row[1] = 2.0 * fy - 1.0;
                row[2] = std::sin(M_PI * fx);
                row[3] = std::cos(M_PI * fx);
                row[4] = std::sin(M_PI * fy);
                row[5] = std::cos(M_PI * fy);
            }
        }
        for (int b = 0; b < tabletop::tok::NUM_BINS; ++b) {
            double* row = p.embed.data() + static_cast<std::size_t>(tabletop::tok::bin_token(b)) * d;
            const double f = static_cast<double>(b) / (tabletop::tok::NUM_BINS - 1);
            row[0] = 2.0 * f - 1.0;
            row[1] = std::sin(M_PI * f);
            row[2] = std::cos(M_PI * f);
        }
    }
    p.patch_proj = gauss({seq::PATCH_DIM, d}, 1.0 / std::sqrt(seq::PATCH_DIM));
    for (int h = 0; h < cfg.n_heads; ++h) {
        p.wq.push_back(gauss({d, dh}, 1.0 / std::sqrt(d)));
        p.wk.push_back(gauss({d, dh}, 1.0 / std::sqrt(d)));
        p.wv.push_back(gauss({d, dh}, 1.0 / std::sqrt(d)));
    }
    p.wo = gauss({d, d}, 1.0 / std::sqrt(d));
    p.mlp1 = gauss({d, hid}, 1.0 / std::sqrt(d));
    p.mlp2 = gauss({hid, d}, 1.0 / std::sqrt(hid));
    p.cot_head = Tensor({d, VOCAB_SIZE});  // zero-initialized output heads
    p.act_head = Tensor({d, cfg.action_dim()});
    return p;
}

std::vector<std::pair<std::string, Tensor*>> PolicyParams::tensor_refs() {
    std::vector<std::pair<std::string, Tensor*>> refs;
    refs.emplace_back("embed", &embed);
    refs.emplace_back("pos", &pos);
    refs.emplace_back("patch_proj", &patch_proj);
    for (std::size_t h = 0; h < wq.size(); ++h) {
        refs.emplace_back("wq" + std::to_string(h), &wq[h]);
        refs.emplace_back("wk" + std::to_string(h), &wk[h]);
        refs.emplace_back("wv" + std::to_string(h), &wv[h]);
    }
    refs.emplace_back("wo", &wo);
    refs.emplace_back("mlp1", &mlp1);
    refs.emplace_back("mlp2", &mlp2);
    refs.emplace_back("cot_head", &cot_head);
    refs.emplace_back("act_head", &act_head);
    return refs;
}

std::vector<std::pair<std::string, const Tensor*>> PolicyParams::tensor_refs() const {
    auto refs = const_cast<PolicyParams*>(this)->tensor_refs();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(refs.size());
    for (auto& [name, t] : refs) out.emplace_back(name, t);
    return out;
}

std::size_t PolicyParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensor_refs()) n += t->size();
    return n;
}

bool PolicyParams::all_finite() const {
    for (const auto& [name, t] : tensor_refs()) {
        if (!t->all_finite()) return false;
    }
    return true;
}

void save_checkpoint(const PolicyParams& params, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["head_kind"] =
        params.cfg.head_kind == Action::Kind::Discrete ? "discrete" : "continuous";
    manifest["d_model"] = params.cfg.d_model;
    manifest["n_heads"] = params.cfg.n_heads;
    manifest["mlp_hidden"] = params.cfg.mlp_hidden;
    manifest["chunk_len"] = params.cfg.chunk_len;
    manifest["leaky_slope"] = params.cfg.leaky_slope;
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& [name, t] : params.tensor_refs()) {
        save_tensor_snapshot(*t, dir / (name + ".tns"));
        tensors.push_back({{"name", name}, {"shape", t->shape()}, {"file", name + ".tns"}});
    }
    manifest["tensors"] = tensors;
    std::ofstream out(dir / "manifest.json");
    out << manifest.dump(2) << '\n';
    if (!out) throw FormatError("cannot write checkpoint manifest in " + dir.string());
}

PolicyParams load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw FormatError("missing checkpoint manifest in " + dir.string());
    nlohmann::json manifest = nlohmann::json::parse(in);
    PolicyConfig cfg;
    cfg.head_kind = manifest.at("head_kind").get<std::string>() == "discrete"
                        ? Action::Kind::Discrete
                        : Action::Kind::Continuous;
    cfg.d_model = manifest.at("d_model").get<int>();
    cfg.n_heads = manifest.at("n_heads").get<int>();
    cfg.mlp_hidden = manifest.at("mlp_hidden").get<int>();
    cfg.chunk_len = manifest.at("chunk_len").get<int>();
    cfg.leaky_slope = manifest.at("leaky_slope").get<double>();
    PolicyParams p = PolicyParams::init(cfg, 0);
    for (auto& [name, t] : p.tensor_refs()) {
        bool found = false;
        for (const auto& entry : manifest.at("tensors")) {
            if (entry.at("name").get<std::string>() == name) {
                Tensor loaded = diffcore::load_tensor_snapshot(dir / entry.at("file").get<std::string>());
                if (!loaded.same_shape(*t)) {
                    throw FormatError("checkpoint tensor " + name + " has shape " +
                                      diffcore::shape_to_string(loaded.shape()));
                }
                *t = std::move(loaded);
                found = true;
                break;
            }
        }
        if (!found) throw FormatError("checkpoint missing tensor " + name);
    }
    return p;
}

// ---------------------------------------------------------------------------
// Graph-side forward
// ---------------------------------------------------------------------------

ParamLeaves make_param_leaves(Graph& g, const PolicyParams& params, bool require_grad) {
    ParamLeaves pl;
    pl.cfg = &params.cfg;
    auto enter = [&](const Tensor& t) -> TensorPtr {
        if (require_grad) return g.leaf(t, true);
        // Frozen parameters are borrowed without copy; never mutated.
        return g.leaf_shared(TensorPtr(TensorPtr(), const_cast<Tensor*>(&t)));
    };
    for (const auto& [name, t] : params.tensor_refs()) pl.ordered.push_back(enter(*t));
    std::size_t i = 0;
    pl.embed = pl.ordered[i++];
    pl.pos = pl.ordered[i++];
    pl.patch_proj = pl.ordered[i++];
    for (int h = 0; h < params.cfg.n_heads; ++h) {
        pl.wq.push_back(pl.ordered[i++]);
        pl.wk.push_back(pl.ordered[i++]);
        pl.wv.push_back(pl.ordered[i++]);
    }
    pl.wo = pl.ordered[i++];
    pl.mlp1 = pl.ordered[i++];
    pl.mlp2 = pl.ordered[i++];
    pl.cot_head = pl.ordered[i++];
    pl.act_head = pl.ordered[i++];
    return pl;
}

TrunkOut build_trunk(Graph& g, const ParamLeaves& pl, const TensorPtr& obs,
                     const Instruction& instr, const std::vector<int>& cot_tokens,
                     const TrunkOptions& opts) {
    const PolicyConfig& cfg = *pl.cfg;
    const int d = cfg.d_model;
    const int n_cot = static_cast<int>(cot_tokens.size());
    if (n_cot > seq::MAX_COT) throw ContractError("reasoning sequence too long for trunk");

    std::vector<int> ids, pos_ids;
    pos_ids.reserve(seq::MAX_SEQ);
    for (int i = 0; i < seq::IMG_TOKENS; ++i) pos_ids.push_back(i);
    for (int i = 0; i < Instruction::kMaxLen; ++i) {
        ids.push_back(instr.tokens[static_cast<std::size_t>(i)]);
        pos_ids.push_back(seq::INSTR_POS + i);
    }
    ids.push_back(tabletop::tok::BOS);
    pos_ids.push_back(seq::BOS_POS);
    for (int i = 0; i < n_cot; ++i) {
        ids.push_back(cot_tokens[static_cast<std::size_t>(i)]);
        pos_ids.push_back(seq::COT_POS + i);
    }
    if (opts.include_act) {
        ids.push_back(tabletop::tok::ACT);
        pos_ids.push_back(seq::ACT_POS);
    }
    const int L = static_cast<int>(pos_ids.size());

    auto img_feat = g.matmul(g.patchify(obs, seq::BLOCK), pl.patch_proj);
    auto tok_emb = g.embedding_lookup(pl.embed, ids);
    auto x0 = g.concat_rows({img_feat, tok_emb});

    if (opts.zero_instruction || opts.zero_cot) {
        Tensor mask({L, d}, 1.0);
        if (opts.zero_instruction) {
            for (int i = seq::INSTR_POS; i < seq::INSTR_POS + Instruction::kMaxLen; ++i) {
                for (int c = 0; c < d; ++c) mask.at(i, c) = 0.0;
            }
        }
        if (opts.zero_cot) {
            for (int i = 0; i < n_cot; ++i) {
                for (int c = 0; c < d; ++c) mask.at(seq::BOS_POS + 1 + i, c) = 0.0;
            }
        }
        x0 = g.mul(x0, g.leaf(std::move(mask)));
    }

    auto x = g.add(x0, g.embedding_lookup(pl.pos, pos_ids));

    // Causal additive mask; a large negative constant underflows to exact
    // zero probability after softmax.
    Tensor mask({L, L});
    for (int i = 0; i < L; ++i) {
        for (int j = i + 1; j < L; ++j) mask.at(i, j) = -1e30;
    }
    auto mask_leaf = g.leaf(std::move(mask));

    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.d_head()));
    std::vector<TensorPtr> head_out;
    for (int h = 0; h < cfg.n_heads; ++h) {
        auto q = g.matmul(x, pl.wq[static_cast<std::size_t>(h)]);
        auto k = g.matmul(x, pl.wk[static_cast<std::size_t>(h)]);
        auto v = g.matmul(x, pl.wv[static_cast<std::size_t>(h)]);
        auto scores = g.add(g.scale(g.matmul(q, g.transpose(k)), inv_sqrt), mask_leaf);
        head_out.push_back(g.matmul(g.softmax_rows(scores), v));
    }
    auto attn = g.matmul(g.concat_cols(head_out), pl.wo);
    auto x2 = g.add(x, attn);
    auto mlp = g.matmul(g.leaky_relu(g.matmul(x2, pl.mlp1), cfg.leaky_slope), pl.mlp2);
    auto hidden = g.add(x2, mlp);

    TrunkOut out;
    out.hidden = hidden;
    out.seq_len = L;
    out.bos_row = seq::IMG_TOKENS + Instruction::kMaxLen;
    out.cot_row0 = out.bos_row + 1;
    out.act_row = opts.include_act ? L - 1 : -1;
    return out;
}

namespace {

TensorPtr select_row(Graph& g, const TensorPtr& m, int row) {
    Tensor sel({1, m->rows()});
    sel.at(0, row) = 1.0;
    return g.matmul(g.leaf(std::move(sel)), m);
}

}  // namespace

TensorPtr cot_nll(Graph& g, const ParamLeaves& pl, const TensorPtr& obs, const Instruction& instr,
                  const CoT& target, bool zero_instruction) {
    if (!target.well_formed()) throw ContractError("cot_nll: malformed target sequence");
    const int T = static_cast<int>(target.tokens.size());
    // Input rows are BOS plus all target tokens except the last; each row
    // predicts the next target token.
    std::vector<int> input(target.tokens.begin(), target.tokens.end() - 1);
    TrunkOptions opts;
    opts.zero_instruction = zero_instruction;
    TrunkOut trunk = build_trunk(g, pl, obs, instr, input, opts);
    TensorPtr loss;
    for (int t = 0; t < T; ++t) {
        auto logits = g.matmul(select_row(g, trunk.hidden, trunk.bos_row + t), pl.cot_head);
        auto term = g.softmax_cross_entropy(logits, target.tokens[static_cast<std::size_t>(t)]);
        loss = loss ? g.add(loss, term) : term;
    }
    return loss;
}

TensorPtr action_readout(Graph& g, const ParamLeaves& pl, const TensorPtr& obs,
                         const Instruction& instr, const CoT& cot, const TrunkOptions& opts_in) {
    if (!cot.well_formed()) throw ContractError("action_readout: malformed reasoning sequence");
    TrunkOptions opts = opts_in;
    opts.include_act = true;
    TrunkOut trunk = build_trunk(g, pl, obs, instr, cot.tokens, opts);
    return g.matmul(select_row(g, trunk.hidden, trunk.act_row), pl.act_head);
}

TensorPtr waypoints_from_raw(Graph& g, const TensorPtr& raw_action, int chunk_len,
                             tabletop::Vec2 start) {
    auto chunk = g.reshape(raw_action, {chunk_len, 3});
    Tensor xy_sel({3, 2});
    xy_sel.at(0, 0) = 1.0;
    xy_sel.at(1, 1) = 1.0;
    auto deltas = g.matmul(chunk, g.leaf(std::move(xy_sel)));
    Tensor lower({chunk_len, chunk_len});
    for (int i = 0; i < chunk_len; ++i) {
        for (int j = 0; j <= i; ++j) lower.at(i, j) = 1.0;
    }
    auto cumulative = g.matmul(g.leaf(std::move(lower)), deltas);
    Tensor origin({chunk_len, 2});
    for (int i = 0; i < chunk_len; ++i) {
        origin.at(i, 0) = start.x;
        origin.at(i, 1) = start.y;
    }
    return g.add(cumulative, g.leaf(std::move(origin)));
}

// ---------------------------------------------------------------------------
// Fast gradient-free forward (bit-identical to the graph path)
// ---------------------------------------------------------------------------

namespace {

class FastTrunk {
public:
    explicit FastTrunk(const PolicyParams& p)
        : p_(p),
          d_(p.cfg.d_model),
          dh_(p.cfg.d_head()),
          nh_(p.cfg.n_heads),
          hid_(p.cfg.mlp_hidden),
          inv_sqrt_(1.0 / std::sqrt(static_cast<double>(p.cfg.d_head()))) {
        x_.resize(static_cast<std::size_t>(seq::MAX_SEQ) * d_);
        k_.resize(static_cast<std::size_t>(nh_) * seq::MAX_SEQ * dh_);
        v_.resize(static_cast<std::size_t>(nh_) * seq::MAX_SEQ * dh_);
        h_row_.resize(static_cast<std::size_t>(d_));
        scratch_.resize(static_cast<std::size_t>(std::max({d_, hid_, seq::MAX_SEQ})) * 2);
    }

    void start(const Observation& obs, const Instruction& instr, bool zero_instruction) {
        len_ = 0;
        const double* img = obs.data();
        const int b = seq::BLOCK;
        const int grid = tabletop::geom::kImageSize / b;
        std::vector<double> block(static_cast<std::size_t>(seq::PATCH_DIM));
        for (int br = 0; br < grid; ++br) {
            for (int bc = 0; bc < grid; ++bc) {
                for (int dr = 0; dr < b; ++dr) {
                    const double* src =
                        img + ((static_cast<std::size_t>(br * b + dr) * tabletop::geom::kImageSize) +
                               static_cast<std::size_t>(bc) * b) *
                                  3;
                    std::copy(src, src + b * 3, block.data() + static_cast<std::size_t>(dr) * b * 3);
                }
                double* e = x_.data() + static_cast<std::size_t>(len_) * d_;
                const int pos = br * grid + bc;
                for (int c = 0; c < d_; ++c) {
                    double acc = 0.0;
                    for (int t = 0; t < seq::PATCH_DIM; ++t) {
                        acc += block[static_cast<std::size_t>(t)] * p_.patch_proj.at(t, c);
                    }
                    e[c] = acc + p_.pos.at(pos, c);
                }
                append_kv_();
                ++len_;
            }
        }
        for (int i = 0; i < Instruction::kMaxLen; ++i) {
            append_token(instr.tokens[static_cast<std::size_t>(i)], seq::INSTR_POS + i, false,
                         zero_instruction);
        }
    }

    // Appends a token row; returns the hidden row when requested.
    const double* append_token(int token, int pos, bool need_hidden, bool zero_embedding = false) {
        double* e = x_.data() + static_cast<std::size_t>(len_) * d_;
        for (int c = 0; c < d_; ++c) {
            // Written as mul-by-zero plus position so masked rows match the
            // graph path bit for bit.
            const double emb = p_.embed.at(token, c);
            e[c] = (zero_embedding ? 0.0 * emb : emb) + p_.pos.at(pos, c);
        }
        append_kv_();
        const int row = len_;
        ++len_;
        return need_hidden ? hidden_row(row) : nullptr;
    }

    // Attention + MLP for one row, over cached k/v of rows 0..row.
    const double* hidden_row(int row) {
        const double* e = x_.data() + static_cast<std::size_t>(row) * d_;
        double* cat = scratch_.data();  // nh*dh == d
        std::vector<double> q(static_cast<std::size_t>(dh_));
        std::vector<double> w(static_cast<std::size_t>(row) + 1);
        for (int h = 0; h < nh_; ++h) {
            const Tensor& wq = p_.wq[static_cast<std::size_t>(h)];
            for (int c = 0; c < dh_; ++c) {
                double acc = 0.0;
                for (int t = 0; t < d_; ++t) acc += e[t] * wq.at(t, c);
                q[static_cast<std::size_t>(c)] = acc;
            }
            const double* kh = k_.data() + static_cast<std::size_t>(h) * seq::MAX_SEQ * dh_;
            double mx = 0.0;
            for (int j = 0; j <= row; ++j) {
                double acc = 0.0;
                const double* kj = kh + static_cast<std::size_t>(j) * dh_;
                for (int c = 0; c < dh_; ++c) acc += q[static_cast<std::size_t>(c)] * kj[c];
                const double s = acc * inv_sqrt_;
                w[static_cast<std::size_t>(j)] = s;
                mx = j == 0 ? s : std::max(mx, s);
            }
            double denom = 0.0;
            for (int j = 0; j <= row; ++j) {
                w[static_cast<std::size_t>(j)] = std::exp(w[static_cast<std::size_t>(j)] - mx);
                denom += w[static_cast<std::size_t>(j)];
            }
            for (int j = 0; j <= row; ++j) w[static_cast<std::size_t>(j)] /= denom;
            const double* vh = v_.data() + static_cast<std::size_t>(h) * seq::MAX_SEQ * dh_;
            double* out = cat + static_cast<std::size_t>(h) * dh_;
            for (int c = 0; c < dh_; ++c) out[c] = 0.0;
            for (int j = 0; j <= row; ++j) {
                const double wj = w[static_cast<std::size_t>(j)];
                const double* vj = vh + static_cast<std::size_t>(j) * dh_;
                for (int c = 0; c < dh_; ++c) out[c] += wj * vj[c];
            }
        }
        // x2 = x + cat @ wo ; hidden = x2 + mlp(x2)
        double* x2 = scratch_.data() + d_;
        for (int c = 0; c < d_; ++c) {
            double acc = 0.0;
            for (int t = 0; t < d_; ++t) acc += cat[t] * p_.wo.at(t, c);
            x2[c] = e[c] + acc;
        }
        std::vector<double> act(static_cast<std::size_t>(hid_));
        for (int j = 0; j < hid_; ++j) {
            double acc = 0.0;
            for (int t = 0; t < d_; ++t) acc += x2[t] * p_.mlp1.at(t, j);
            act[static_cast<std::size_t>(j)] = acc > 0.0 ? acc : acc * p_.cfg.leaky_slope;
        }
        for (int c = 0; c < d_; ++c) {
            double acc = 0.0;
            for (int j = 0; j < hid_; ++j) acc += act[static_cast<std::size_t>(j)] * p_.mlp2.at(j, c);
            h_row_[static_cast<std::size_t>(c)] = x2[c] + acc;
        }
        return h_row_.data();
    }

    int length() const { return len_; }

private:
    void append_kv_() {
        const double* e = x_.data() + static_cast<std::size_t>(len_) * d_;
        for (int h = 0; h < nh_; ++h) {
            const Tensor& wk = p_.wk[static_cast<std::size_t>(h)];
            const Tensor& wv = p_.wv[static_cast<std::size_t>(h)];
            double* kr = k_.data() + (static_cast<std::size_t>(h) * seq::MAX_SEQ + len_) * dh_;
            double* vr = v_.data() + (static_cast<std::size_t>(h) * seq::MAX_SEQ + len_) * dh_;
            for (int c = 0; c < dh_; ++c) {
                double ka = 0.0, va = 0.0;
                for (int t = 0; t < d_; ++t) {
                    ka += e[t] * wk.at(t, c);
                    va += e[t] * wv.at(t, c);
                }
                kr[c] = ka;
                vr[c] = va;
            }
        }
    }

    const PolicyParams& p_;
    const int d_, dh_, nh_, hid_;
    const double inv_sqrt_;
    int len_ = 0;
    std::vector<double> x_, k_, v_, h_row_, scratch_;
};

std::vector<double> head_logits(const double* h, const Tensor& head) {
    const int d = head.rows(), n = head.cols();
    std::vector<double> out(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int t = 0; t < d; ++t) acc += h[t] * head.at(t, j);
        out[static_cast<std::size_t>(j)] = acc;
    }
    return out;
}

int argmax_index(const std::vector<double>& v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i) {
        if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
    }
    return best;
}

}  // namespace

Decoded generate_cot(const PolicyParams& params, const Observation& obs, const Instruction& instr) {
    FastTrunk ft(params);
    ft.start(obs, instr, false);
    Decoded out;
    const double* h = ft.append_token(tabletop::tok::BOS, seq::BOS_POS, true);
    std::vector<double> logits = head_logits(h, params.cot_head);
    for (int t = 0; t < seq::MAX_COT; ++t) {
        // Greedy with lowest-index tie-break; the final slot is forced to END
        // so sequences always terminate.
        const int token = (t == seq::MAX_COT - 1) ? tabletop::tok::END : argmax_index(logits);
        out.logits.push_back(logits);
        out.cot.tokens.push_back(token);
        if (token == tabletop::tok::END) break;
        h = ft.append_token(token, seq::COT_POS + t, true);
        logits = head_logits(h, params.cot_head);
    }
    return out;
}

std::vector<std::vector<double>> cot_teacher_logits(const PolicyParams& params,
                                                    const Observation& obs,
                                                    const Instruction& instr,
                                                    const std::vector<int>& cot_tokens) {
    FastTrunk ft(params);
    ft.start(obs, instr, false);
    std::vector<std::vector<double>> rows;
    const double* h = ft.append_token(tabletop::tok::BOS, seq::BOS_POS, true);
    rows.push_back(head_logits(h, params.cot_head));
    for (std::size_t t = 0; t < cot_tokens.size(); ++t) {
        h = ft.append_token(cot_tokens[t], seq::COT_POS + static_cast<int>(t), true);
        rows.push_back(head_logits(h, params.cot_head));
    }
    return rows;
}

ActionOut generate_action(const PolicyParams& params, const Observation& obs,
                          const Instruction& instr, const CoT& cot, bool zero_instruction) {
    if (!cot.well_formed()) throw ContractError("generate_action: malformed reasoning sequence");
    FastTrunk ft(params);
    ft.start(obs, instr, zero_instruction);
    ft.append_token(tabletop::tok::BOS, seq::BOS_POS, false);
    for (std::size_t t = 0; t < cot.tokens.size(); ++t) {
        ft.append_token(cot.tokens[t], seq::COT_POS + static_cast<int>(t), false);
    }
    const double* h = ft.append_token(tabletop::tok::ACT, seq::ACT_POS, true);
    ActionOut out;
    out.raw = head_logits(h, params.act_head);
    if (params.cfg.head_kind == Action::Kind::Discrete) {
        out.actions.push_back(Action::discrete(argmax_index(out.raw)));
    } else {
        for (int k = 0; k < params.cfg.chunk_len; ++k) {
            out.actions.push_back(Action::continuous(out.raw[static_cast<std::size_t>(k) * 3],
                                                     out.raw[static_cast<std::size_t>(k) * 3 + 1],
                                                     out.raw[static_cast<std::size_t>(k) * 3 + 2]));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Behavior cloning
// ---------------------------------------------------------------------------

BatchGradResult bc_batch_gradient(const PolicyParams& params,
                                  const std::vector<const DemoSample*>& batch,
                                  const std::vector<std::pair<bool, bool>>& drops,
                                  double action_loss_weight, Exec exec) {
    const std::size_t n = batch.size();
    if (n == 0) throw ContractError("empty batch");
    std::vector<double> losses(n, 0.0);
    std::vector<std::vector<std::vector<double>>> sample_grads(n);

    for_each_index(exec, n, [&](std::size_t s) {
        const DemoSample& sample = *batch[s];
        Graph g;
        ParamLeaves pl = make_param_leaves(g, params, true);
        auto obs = g.leaf_shared(TensorPtr(TensorPtr(), const_cast<Observation*>(&sample.obs)));

        auto loss = cot_nll(g, pl, obs, sample.instr, sample.cot, false);
        TrunkOptions aopts;
        aopts.zero_instruction = drops[s].first;
        aopts.zero_cot = drops[s].second;
        auto raw = action_readout(g, pl, obs, sample.instr, sample.cot, aopts);
        TensorPtr act_loss;
        if (params.cfg.head_kind == Action::Kind::Discrete) {
            act_loss = g.softmax_cross_entropy(raw, sample.disc_action);
        } else {
            Tensor target({1, params.cfg.chunk_len * 3});
            for (int k = 0; k < params.cfg.chunk_len; ++k) {
                for (int c = 0; c < 3; ++c) {
                    target[static_cast<std::size_t>(k) * 3 + c] =
                        sample.chunk[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)];
                }
            }
            act_loss = g.scale(g.squared_error(raw, g.leaf(std::move(target))),
                               1.0 / static_cast<double>(params.cfg.chunk_len * 3));
        }
        loss = g.add(loss, g.scale(act_loss, action_loss_weight));
        g.backward(loss);
        losses[s] = (*loss)[0];
        auto& grads = sample_grads[s];
        grads.reserve(pl.ordered.size());
        for (const auto& leaf : pl.ordered) grads.push_back(leaf->grad);
    });

    BatchGradResult out;
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t s = 0; s < n; ++s) out.mean_loss += losses[s];
    out.mean_loss *= inv;
    out.grads = sample_grads[0];
    for (std::size_t s = 1; s < n; ++s) {
        for (std::size_t t = 0; t < out.grads.size(); ++t) {
            for (std::size_t j = 0; j < out.grads[t].size(); ++j) {
                out.grads[t][j] += sample_grads[s][t][j];
            }
        }
    }
    for (auto& g : out.grads) {
        for (double& v : g) v *= inv;
    }
    return out;
}

TrainResult train_bc(const std::vector<DemoSample>& demos, const PolicyConfig& pcfg,
                     const TrainConfig& tcfg, Exec exec) {
    if (demos.empty()) throw TrainingError("behavior cloning requires a non-empty demo set");
    PolicyParams params = PolicyParams::init(pcfg, tcfg.seed);
    Adam adam(tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps);
    Rng rng(derive_seed(tcfg.seed, "bc-train"));

    std::vector<Tensor*> refs;
    for (auto& [name, t] : params.tensor_refs()) refs.push_back(t);

    TrainLog log;
    std::vector<std::size_t> order(demos.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    PolicyParams last_finite = params;
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        if (tcfg.epochs > 1) {
            const double t = static_cast<double>(epoch) / (tcfg.epochs - 1);
            const double frac =
                tcfg.lr_final_fraction +
                (1.0 - tcfg.lr_final_fraction) * 0.5 * (1.0 + std::cos(M_PI * t));
            adam.set_lr(tcfg.lr * frac);
        }
        rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t counted = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(tcfg.batch_size)) {
            const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(tcfg.batch_size));
            std::vector<const DemoSample*> batch;
            std::vector<std::pair<bool, bool>> drops;
            for (std::size_t i = b0; i < b1; ++i) {
                batch.push_back(&demos[order[i]]);
                drops.emplace_back(rng.uniform() < tcfg.instr_dropout,
                                   rng.uniform() < tcfg.cot_dropout);
            }
            BatchGradResult res =
                bc_batch_gradient(params, batch, drops, tcfg.action_loss_weight, exec);
            if (!std::isfinite(res.mean_loss)) {
                throw TrainingError("behavior cloning diverged at epoch " + std::to_string(epoch) +
                                    "; last finite checkpoint retained in caller scope");
            }
            adam.step(refs, res.grads);
            epoch_loss += res.mean_loss * static_cast<double>(batch.size());
            counted += batch.size();
        }
        if (!params.all_finite()) {
            params = last_finite;
            throw TrainingError("parameters became non-finite at epoch " + std::to_string(epoch));
        }
        last_finite = params;
        log.epoch_loss.push_back(epoch_loss / static_cast<double>(counted));
    }
    return {std::move(params), std::move(log)};
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

namespace {

bool task_done(const tabletop::Scene& scene, const TaskSpec& spec) {
    if (spec.kind == tabletop::TaskKind::Pick) {
        // Grasping any object commits the episode.
        return scene.gripper.held_id >= 0;
    }
    return tabletop::check_success(scene, spec.user_class, spec.kind) ||
           tabletop::check_success(scene, spec.target_class, spec.kind);
}

}  // namespace

RolloutResult rollout(const PolicyParams& params, const TaskSpec& spec, std::uint64_t layout_seed,
                      const Instruction& instr, const RolloutOverrides& overrides,
                      const RolloutOptions& options) {
    tabletop::Scene scene = tabletop::generate_layout(spec, layout_seed);
    RolloutResult result;
    result.trajectory.push_back({scene.gripper.x, scene.gripper.y});

    const Instruction action_instr = overrides.action_instruction.value_or(instr);
    bool done = false;
    while (!done) {
        Observation obs = tabletop::render(scene);
        if (overrides.transform_observation) obs = overrides.transform_observation(obs);

        CoT cot = overrides.forced_cot ? *overrides.forced_cot
                                       : generate_cot(params, obs, instr).cot;
        ActionOut actions = generate_action(params, obs, action_instr, cot,
                                            overrides.mask_action_instruction);

        RolloutStepRecord rec;
        rec.env_step = result.env_steps;
        rec.cot = cot;
        rec.action = actions;
        if (options.keep_observations) rec.obs = obs;
        result.steps.push_back(std::move(rec));

        for (const Action& a : actions.actions) {
            auto [next, truncated] = tabletop::step(scene, a);
            scene = std::move(next);
            result.trajectory.push_back({scene.gripper.x, scene.gripper.y});
            ++result.env_steps;
            if (task_done(scene, spec)) {
                done = true;
                break;
            }
            if (truncated) {
                result.truncated = true;
                done = true;
                break;
            }
        }
    }
    result.user_success = tabletop::check_success(scene, spec.user_class, spec.kind);
    result.target_success = tabletop::check_success(scene, spec.target_class, spec.kind);
    return result;
}

RolloutResult expert_rollout(const TaskSpec& spec, std::uint64_t layout_seed,
                             const Instruction& instr, Action::Kind kind,
                             bool keep_observations) {
    tabletop::Scene scene = tabletop::generate_layout(spec, layout_seed);
    RolloutResult result;
    result.trajectory.push_back({scene.gripper.x, scene.gripper.y});
    bool done = false;
    while (!done) {
        auto [cot, action] = tabletop::scripted_expert(scene, instr, kind);
        RolloutStepRecord rec;
        rec.env_step = result.env_steps;
        rec.cot = cot;
        rec.action.actions.push_back(action);
        if (keep_observations) rec.obs = tabletop::render(scene);
        result.steps.push_back(std::move(rec));

        auto [next, truncated] = tabletop::step(scene, action);
        scene = std::move(next);
        result.trajectory.push_back({scene.gripper.x, scene.gripper.y});
        ++result.env_steps;
        if (spec.kind == tabletop::TaskKind::Pick) {
            done = scene.gripper.held_id >= 0;
        } else {
            done = tabletop::check_success(scene, instr.target_class(), spec.kind);
        }
        if (truncated) {
            result.truncated = true;
            done = true;
        }
    }
    result.user_success = tabletop::check_success(scene, spec.user_class, spec.kind);
    result.target_success = tabletop::check_success(scene, spec.target_class, spec.kind);
    return result;
}

std::vector<DemoSample> expert_demos(const std::vector<TaskSpec>& tasks,
                                     const std::vector<std::uint64_t>& seeds, Action::Kind kind,
                                     int chunk_len) {
    std::vector<DemoSample> demos;
    for (const TaskSpec& task : tasks) {
        for (const std::uint64_t seed : seeds) {
            for (const Instruction* instr : {&task.user_instruction, &task.target_instruction}) {
                RolloutResult ep = expert_rollout(task, seed, *instr, kind, true);
                for (std::size_t t = 0; t < ep.steps.size(); ++t) {
                    DemoSample d;
                    d.obs = ep.steps[t].obs;
                    d.instr = *instr;
                    d.cot = ep.steps[t].cot;
                    const Action& a = ep.steps[t].action.actions[0];
                    if (kind == Action::Kind::Discrete) {
                        d.disc_action = a.token;
                    } else {
                        for (int k = 0; k < chunk_len; ++k) {
                            if (t + static_cast<std::size_t>(k) < ep.steps.size()) {
                                const Action& ak =
                                    ep.steps[t + static_cast<std::size_t>(k)].action.actions[0];
                                d.chunk.push_back({ak.dx, ak.dy, ak.grip});
                            } else {
                                // Past the episode end: hold position, keep grip.
                                d.chunk.push_back({0.0, 0.0, 1.0});
                            }
                        }
                    }
                    demos.push_back(std::move(d));
                }
            }
        }
    }
    return demos;
}

}  // namespace patchlab::policy
