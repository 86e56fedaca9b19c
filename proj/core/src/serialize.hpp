// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Private to the library: archive encoders shared by the bank and checkpoints.

#pragma once

#include <string>

#include "archive.hpp"
#include "cmoe/moe.hpp"
#include "cmoe/ptl.hpp"

namespace cmoe::serialize {

using archive::json;

json put_router_set(archive::Writer& w, const std::string& prefix, const moe::RouterSet& routers);
moe::RouterSet get_router_set(const archive::Reader& r, const json& j, const std::string& path);

json put_bank(archive::Writer& w, const ptl::PrimitiveBank& bank);
ptl::PrimitiveBank get_bank(const archive::Reader& r, const json& j, const std::string& path);

}  // namespace cmoe::serialize
