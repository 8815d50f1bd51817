// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace lorabridge {

// Raised for malformed inputs and violated preconditions. The CLI maps it to
// exit status 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace lorabridge
