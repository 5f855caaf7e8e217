#pragma once

#include <string>
#include <vector>

namespace sbd::checks {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string measured;
  std::string tolerance;
};

// "PASS name | measured ... | tolerance ..."
std::string format(const CheckResult& r);

struct CheckOptions {
  // Switch every transformer used by the cache checks to the bidirectional
  // attention rule, which must make them fail.
  bool mutate = false;
};

// Central differences on three random 64-bit denoisers.
CheckResult gradient_fidelity(const CheckOptions& opt = {});
// Masked fraction at t in {0.1, 0.3, 0.7} over 100k positions, 3 sigma.
CheckResult mask_marginals(const CheckOptions& opt = {});
// Block-by-block cached forwards vs one full forward, f32 and f64.
CheckResult forward_cache_equivalence(const CheckOptions& opt = {});
// Two-stage sampling with and without the cache over 20 seeds.
CheckResult sampler_cache_equivalence(const CheckOptions& opt = {});
// K=1, block L vs the full-sequence masked-diffusion reference.
CheckResult mdlm_degeneration(const CheckOptions& opt = {});
// K=1, block 1, T=1 vs the direct left-to-right reference.
CheckResult ar_degeneration(const CheckOptions& opt = {});
// Mixed loss at lambda in {0, 1} vs the pure objectives on one rng stream.
CheckResult mixed_loss_degeneration(const CheckOptions& opt = {});
// Two-stream loss vs the per-block loop on 50 tiny instances, 1e-10.
CheckResult two_stream_equivalence(const CheckOptions& opt = {});
// gamma = 0 keeps the draft; gamma = 1 forgets it.
CheckResult gamma_identities(const CheckOptions& opt = {});
// V=3, L=4, block 2: exact enumeration vs 100k samples, TV < 0.02.
CheckResult sampler_distribution(const CheckOptions& opt = {});
// Audited NFEs equal predictions and the instrumented counter; L=1024
// closed-form budgets.
CheckResult nfe_accounting(const CheckOptions& opt = {});
// Snapshot remask vs a sort oracle, exhaustive for L <= 8.
CheckResult remask_selection(const CheckOptions& opt = {});

// Runs fn, turning an escaped exception into a failed result.
CheckResult guarded(const std::string& name, CheckResult (*fn)(const CheckOptions&),
                    const CheckOptions& opt);

// Every check above in order.
std::vector<CheckResult> run_all(const CheckOptions& opt = {});

}  // namespace sbd::checks
