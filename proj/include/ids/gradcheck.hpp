#ifndef IDS_GRADCHECK_HPP
#define IDS_GRADCHECK_HPP

// Finite-difference verification suite covering every differentiable op and
// the training losses. Shared by the CLI `gradcheck` command and the tests.

#include <string>
#include <vector>

namespace ids {

struct GradCheckResult {
    std::string op;
    double max_rel_err = 0.0;
    bool pass = false;
};

// tolerance: 1e-3 relative, eps 1e-3, inputs in [-1,1].
// inject_conv_sign_flip is a mutation fixture: it negates the analytic conv
// input gradient before comparing, and must make the suite fail.
std::vector<GradCheckResult> run_gradcheck_suite(bool inject_conv_sign_flip = false);

bool gradcheck_all_passed(const std::vector<GradCheckResult>& results);

}  // namespace ids

#endif
