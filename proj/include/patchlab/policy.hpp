#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "patchlab/graph.hpp"
#include "patchlab/parallel.hpp"
#include "patchlab/tabletop.hpp"

namespace patchlab::policy {

using diffcore::Graph;
using diffcore::Tensor;
using diffcore::TensorPtr;
using tabletop::Action;
using tabletop::CoT;
using tabletop::Instruction;
using tabletop::Observation;
using tabletop::TaskSpec;

using Trajectory = std::vector<tabletop::Vec2>;

// Sequence layout (positions are fixed per role):
//   [0..63]  image tokens (48x48 patchified into 6x6 blocks, projected)
//   [64..71] instruction tokens (PAD-filled to 8)
//   [72]     BOS
//   [73..79] reasoning tokens (up to 7, END-terminated)
//   [80]     ACT query token (action readout)
namespace seq {
inline constexpr int IMG_TOKENS = 64;
inline constexpr int INSTR_POS = 64;
inline constexpr int BOS_POS = 72;
inline constexpr int COT_POS = 73;
inline constexpr int ACT_POS = 80;
inline constexpr int MAX_SEQ = 81;
inline constexpr int MAX_COT = 7;
inline constexpr int PATCH_DIM = 108;  // 6*6*3
inline constexpr int BLOCK = 6;
}  // namespace seq

struct PolicyConfig {
    Action::Kind head_kind = Action::Kind::Continuous;
    int d_model = 32;
    int n_heads = 4;
    int mlp_hidden = 64;
    int chunk_len = 4;
    double leaky_slope = 0.01;

    int d_head() const { return d_model / n_heads; }
    int action_dim() const {
        return head_kind == Action::Kind::Discrete ? tabletop::act::NUM_DISCRETE : chunk_len * 3;
    }
};

// All learnable tensors. Output heads are zero-initialized; the trunk uses
// fan-in-scaled Gaussian init.
struct PolicyParams {
    PolicyConfig cfg;
    Tensor embed;       // VOCAB x d
    Tensor pos;         // MAX_SEQ x d
    Tensor patch_proj;  // PATCH_DIM x d
    std::vector<Tensor> wq, wk, wv;  // per head, d x d_head
    Tensor wo;          // d x d
    Tensor mlp1, mlp2;  // d x hidden, hidden x d
    Tensor cot_head;    // d x VOCAB
    Tensor act_head;    // d x action_dim

    static PolicyParams init(const PolicyConfig& cfg, std::uint64_t seed);

    // Stable enumeration used by the optimizer, checkpoints and gradient
    // batching. Order must not change between save and load.
    std::vector<std::pair<std::string, Tensor*>> tensor_refs();
    std::vector<std::pair<std::string, const Tensor*>> tensor_refs() const;
    std::size_t parameter_count() const;
    bool all_finite() const;
};

void save_checkpoint(const PolicyParams& params, const std::filesystem::path& dir);
PolicyParams load_checkpoint(const std::filesystem::path& dir);

// Graph-side forward. Parameters enter a graph once via ParamLeaves and may
// be reused by several trunk builds within that graph.
struct ParamLeaves {
    const PolicyConfig* cfg = nullptr;
    TensorPtr embed, pos, patch_proj, wo, mlp1, mlp2, cot_head, act_head;
    std::vector<TensorPtr> wq, wk, wv;
    std::vector<TensorPtr> ordered;  // same order as tensor_refs
};
ParamLeaves make_param_leaves(Graph& g, const PolicyParams& params, bool require_grad);

struct TrunkOptions {
    bool include_act = false;
    bool zero_instruction = false;  // zero instruction token embeddings, keep positions
    bool zero_cot = false;          // zero reasoning token embeddings, keep positions
};

struct TrunkOut {
    TensorPtr hidden;  // L x d
    int seq_len = 0;
    int bos_row = 0;
    int cot_row0 = 0;   // row of first reasoning token
    int act_row = -1;
};

TrunkOut build_trunk(Graph& g, const ParamLeaves& pl, const TensorPtr& obs,
                     const Instruction& instr, const std::vector<int>& cot_tokens,
                     const TrunkOptions& opts);

// Teacher-forced negative log-likelihood of `target` (END included).
TensorPtr cot_nll(Graph& g, const ParamLeaves& pl, const TensorPtr& obs, const Instruction& instr,
                  const CoT& target, bool zero_instruction = false);

// Raw action readout at the ACT row: (1 x 11) logits or (1 x chunk*3).
TensorPtr action_readout(Graph& g, const ParamLeaves& pl, const TensorPtr& obs,
                         const Instruction& instr, const CoT& cot, const TrunkOptions& opts);

// Integrates per-step deltas into absolute waypoints from `start`:
// raw (1 x chunk*3) -> (chunk x 2).
TensorPtr waypoints_from_raw(Graph& g, const TensorPtr& raw_action, int chunk_len,
                             tabletop::Vec2 start);

// --- Fast (gradient-free) evaluation for rollouts ------------------------

// Greedy decode; logits for each emitted token are retained.
struct Decoded {
    CoT cot;
    std::vector<std::vector<double>> logits;
};
Decoded generate_cot(const PolicyParams& params, const Observation& obs, const Instruction& instr);

// Logits at each teacher-forced position (BOS then each reasoning token
// except the last), for autoregressive-consistency checks.
std::vector<std::vector<double>> cot_teacher_logits(const PolicyParams& params,
                                                    const Observation& obs,
                                                    const Instruction& instr,
                                                    const std::vector<int>& cot_tokens);

struct ActionOut {
    std::vector<Action> actions;      // one entry (discrete) or chunk_len entries
    std::vector<double> raw;          // head output
};
ActionOut generate_action(const PolicyParams& params, const Observation& obs,
                          const Instruction& instr, const CoT& cot,
                          bool zero_instruction = false);

// --- Behavior cloning -----------------------------------------------------

struct DemoSample {
    Observation obs;
    Instruction instr;
    CoT cot;
    int disc_action = tabletop::act::NOOP;
    std::vector<std::array<double, 3>> chunk;  // chunk_len x (dx,dy,grip)
};

struct TrainConfig {
    int epochs = 30;
    int batch_size = 16;
    double lr = 3e-3;
    double lr_final_fraction = 0.15;  // cosine decay floor
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    double instr_dropout = 0.0;  // zero instruction embeddings in the action pass
    double cot_dropout = 0.0;    // zero reasoning embeddings in the action pass
    double action_loss_weight = 1.0;
    std::uint64_t seed = 0;
};

struct TrainLog {
    std::vector<double> epoch_loss;
};

struct TrainResult {
    PolicyParams params;
    TrainLog log;
};

// Per-sample loss + gradient, reduced in index order so the result is
// bit-identical between serial and parallel execution.
struct BatchGradResult {
    double mean_loss = 0.0;
    std::vector<std::vector<double>> grads;  // aligned with tensor_refs order
};
BatchGradResult bc_batch_gradient(const PolicyParams& params,
                                  const std::vector<const DemoSample*>& batch,
                                  const std::vector<std::pair<bool, bool>>& drops,
                                  double action_loss_weight, Exec exec);

TrainResult train_bc(const std::vector<DemoSample>& demos, const PolicyConfig& pcfg,
                     const TrainConfig& tcfg, Exec exec = Exec::Parallel);

// --- Rollouts ---------------------------------------------------------

struct RolloutOverrides {
    // Applied to every rendered observation (patch compositing).
    std::function<Observation(const Observation&)> transform_observation;
    // Instruction used for action generation (cross-sample shuffling).
    std::optional<Instruction> action_instruction;
    // Zero instruction embeddings during action generation (masking).
    bool mask_action_instruction = false;
    // Replace generated reasoning wholesale.
    std::optional<CoT> forced_cot;
};

struct RolloutStepRecord {
    int env_step = 0;
    CoT cot;
    ActionOut action;
    Observation obs;  // only kept when requested
};

struct RolloutResult {
    std::vector<RolloutStepRecord> steps;  // one per re-plan
    Trajectory trajectory;                 // start + one point per env step
    bool user_success = false;
    bool target_success = false;
    bool truncated = false;
    int env_steps = 0;
};

struct RolloutOptions {
    bool keep_observations = false;
};

RolloutResult rollout(const PolicyParams& params, const TaskSpec& spec, std::uint64_t layout_seed,
                      const Instruction& instr, const RolloutOverrides& overrides = {},
                      const RolloutOptions& options = {});

// Expert reference episode under the same loop (used for demos and as the
// similarity reference trajectories).
RolloutResult expert_rollout(const TaskSpec& spec, std::uint64_t layout_seed,
                             const Instruction& instr, Action::Kind kind,
                             bool keep_observations = false);

std::vector<DemoSample> expert_demos(const std::vector<TaskSpec>& tasks,
                                     const std::vector<std::uint64_t>& seeds, Action::Kind kind,
                                     int chunk_len);

}  // namespace patchlab::policy
