#pragma once

namespace dacnet::cli {

// Exit codes: 0 success, 2 usage error, 3 format/I-O error, 4 numerical
// abort, 5 gradcheck failure.
int run(int argc, const char* const* argv);

}  // namespace dacnet::cli
