#include "gtest/gtest.h"

TEST(Placeholder, cli_test) { SUCCEED(); }
