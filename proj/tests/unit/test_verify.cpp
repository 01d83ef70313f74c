#include <doctest.h>

#include "qec/verify.hpp"

using namespace qec;

TEST_CASE("invariant suite passes on a short run") {
  SuiteOptions opt;
  opt.trials = 3;
  opt.seed = 5;
  for (const auto& r : run_invariant_suite(opt)) {
    INFO(r.name << " max error " << r.max_error);
    CHECK(r.passed());
    CHECK(r.trials > 0);
  }
}

TEST_CASE("negative control is caught") {
  SuiteOptions opt;
  opt.trials = 3;
  opt.skip_canonicalization = true;
  bool layer_failed = false, network_failed = false;
  for (const auto& r : check_qec_layer(opt))
    if (r.name == "qec_forward pose equivariance") layer_failed = !r.passed();
  for (const auto& r : check_network(opt))
    if (r.name == "network_forward pose equivariance") network_failed = !r.passed();
  CHECK(layer_failed);
  CHECK(network_failed);
}

TEST_CASE("oracle checks pass on a short run") {
  SuiteOptions opt;
  opt.trials = 2;
  for (const auto& r : check_weiszfeld_oracle(opt, 3)) {
    INFO(r.name << " max error " << r.max_error);
    CHECK(r.passed());
  }
  opt.trials = 1;
  for (const auto& r : check_gradients(opt)) {
    INFO(r.name << " max error " << r.max_error);
    CHECK(r.passed());
  }
  const CheckResult m = check_mean_optimality(5, 2000, 1);
  CHECK(m.passed());
  CHECK(m.trials == 5);
}
