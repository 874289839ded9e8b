#include <gtest/gtest.h>

#include "gradcheck.hpp"

namespace {

void expect_clean(const gradcheck::Stats& st, int instances) {
  EXPECT_EQ(st.instances, instances);
  EXPECT_EQ(st.failures, 0) << st.first_failure << " (worst rel " << st.worst << ", " << st.checked << " checked)";
  EXPECT_GT(st.checked, instances);
}

TEST(Gradients, Head) { expect_clean(gradcheck::run(gradcheck::head_instance, 50, 11), 50); }
TEST(Gradients, SadaAndHeadStack) { expect_clean(gradcheck::run(gradcheck::sada_instance, 50, 12), 50); }
TEST(Gradients, Backbone) { expect_clean(gradcheck::run(gradcheck::backbone_instance, 50, 13), 50); }
TEST(Gradients, DetectionLoss) { expect_clean(gradcheck::run(gradcheck::loss_instance, 50, 14), 50); }

}  // namespace
