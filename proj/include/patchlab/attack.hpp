#pragma once

#include <filesystem>
#include <optional>
#include <utility>

#include "patchlab/homography.hpp"
#include "patchlab/policy.hpp"

namespace patchlab::attack {

using diffcore::Graph;
using diffcore::Tensor;
using diffcore::TensorPtr;
using policy::Observation;
using tabletop::CoT;
using tabletop::Instruction;

// Canonical patch space (pixels live here; a homography maps them onto the
// image plane).
inline constexpr int kPatchSide = 12;

struct Patch {
    Tensor pixels;  // (h, w, 3) in [0,1]
    Tensor base;    // frozen copy the budget projection is anchored to

    static Patch uniform(int side, double value);
    int side() const { return pixels.shape()[0]; }
};

struct PatchMask {
    Tensor mask;  // (H, W), values exactly 0 or 1
};

struct EotConfig {
    double rotation_deg = 0.0;
    double scale_lo = 1.0, scale_hi = 1.0;
    double translate_px = 0.0;
    double perspective = 0.0;
};

enum class Method { Trap, Random, ActionOnly, CotOnly };
std::string method_name(Method m);
Method method_from_name(const std::string& name);

struct AttackConfig {
    double epsilon = 64.0 / 255.0;  // l-inf budget around the base patch
    double eta = 8.0 / 255.0;       // step size
    int epochs = 80;
    int batch_size = 4;
    double lambda_action = 1.0;
    double tv_weight = 1e-3;
    // Raw-gradient step by default; sign mode is the common PGD variant.
    bool sign_step = false;
    int plateau_patience = 10;
    EotConfig eot;
    Method method = Method::Trap;
    double patch_fraction = 0.3;  // canvas region side as a fraction of image width
    std::uint64_t seed = 0;

    void validate() const;
};

// Canonical patch -> fixed canvas region for the given size fraction.
Homography base_patch_homography(int patch_side, double fraction);

// Base homography composed with sampled rotation, isotropic scale,
// translation jitter and perspective jitter. With all ranges zero this
// returns the base exactly.
Homography sample_transform(const EotConfig& eot, const Homography& base, int patch_side,
                            Rng& rng);

diffcore::SampleGrid make_sample_grid(const Homography& h, int patch_h, int patch_w,
                                      int canvas_h, int canvas_w);

// Inverse-warp with bilinear sampling; differentiable w.r.t. patch pixels.
std::pair<TensorPtr, PatchMask> warp_patch(Graph& g, const TensorPtr& patch, const Homography& h,
                                           int canvas_h, int canvas_w);

// out = (1 - M) * obs + M * patch_image, differentiable w.r.t. the patch.
TensorPtr composite(Graph& g, const TensorPtr& obs, const TensorPtr& patch_image,
                    const PatchMask& mask);

TensorPtr tv_loss(Graph& g, const TensorPtr& patch);

// Teacher-forced hijack losses against an adversarial observation.
TensorPtr cot_hijack_loss(Graph& g, const policy::ParamLeaves& pl, const TensorPtr& adv_obs,
                          const Instruction& instr, const CoT& target_cot);
TensorPtr action_loss_discrete(Graph& g, const policy::ParamLeaves& pl, const TensorPtr& adv_obs,
                               const CoT& target_cot, const Instruction& instr, int target_action);
TensorPtr action_loss_continuous(Graph& g, const policy::ParamLeaves& pl, const TensorPtr& adv_obs,
                                 const CoT& target_cot, const Instruction& instr,
                                 const policy::Trajectory& target_waypoints,
                                 tabletop::Vec2 gripper);

// Gradient-free warp + composite used at evaluation time. Bit-identical to
// the graph path for the same homography.
class PatchApplicator {
public:
    PatchApplicator(const Patch& patch, const Homography& h, int canvas_h, int canvas_w);
    Observation apply(const Observation& obs) const;
    const PatchMask& mask() const { return mask_; }

private:
    Tensor warped_;
    PatchMask mask_;
};

// --- Color calibration -----------------------------------------------------

// 3 -> 16 -> 16 -> 3 fully connected net with leaky-relu activations,
// output clamped to [0,1]. Models the print-and-capture color shift.
struct ColorCalibrator {
    Tensor w1, b1, w2, b2, w3, b3;
    double leaky_slope = 0.01;

    static ColorCalibrator init(std::uint64_t seed);
    std::array<double, 3> apply(const std::array<double, 3>& rgb) const;
};

using ColorPair = std::pair<std::array<double, 3>, std::array<double, 3>>;  // digital, captured

struct CalibratorFit {
    ColorCalibrator net;
    double holdout_rmse = 0.0;
    bool degenerate_warning = false;
};

struct CalibratorFitConfig {
    int epochs = 400;
    int batch_size = 32;
    double lr = 4e-3;
    double holdout_fraction = 0.25;
    std::uint64_t seed = 1;
};

CalibratorFit fit_color_calibrator(const std::vector<ColorPair>& pairs,
                                   const CalibratorFitConfig& cfg = {});

// Per-pixel calibrated patch inside the graph (calibrator weights frozen).
TensorPtr apply_calibrator(Graph& g, const ColorCalibrator& net, const TensorPtr& patch);

// --- Patch optimization -----------------------------------------------------

struct AttackSample {
    Observation obs;            // stored clean observation
    Instruction instr;          // instruction supplied to the policy
    CoT target_cot;
    int target_disc = 0;                  // discrete-head target action
    policy::Trajectory target_waypoints;  // continuous-head target (absolute)
    tabletop::Vec2 gripper;               // gripper position in the stored state
};

struct LossRow {
    int epoch = 0;
    double l_cot = 0.0, l_action = 0.0, l_tv = 0.0, total = 0.0;
};

struct OptimizeResult {
    Patch patch;
    std::vector<LossRow> trace;
    int epochs_run = 0;
    // In-loop budget audit: worst observed excess over the epsilon ball and
    // the [0,1] range after any step. Both must be exactly zero.
    double max_budget_violation = 0.0;
    double max_range_violation = 0.0;
    bool aborted_non_finite = false;
};

OptimizeResult optimize_patch(const std::vector<AttackSample>& samples,
                              const policy::PolicyParams& params, const AttackConfig& cfg,
                              Exec exec = Exec::Parallel,
                              const std::vector<Instruction>* instruction_pool = nullptr,
                              const ColorCalibrator* calibrator = nullptr);

// --- Patch files -------------------------------------------------------------

// Binary PPM (P6), 8-bit, round-half-away-from-zero quantization.
void export_patch(const Patch& patch, const std::filesystem::path& path);
Patch import_patch(const std::filesystem::path& path);

}  // namespace patchlab::attack
