#pragma once

// Command-line entry point: gen-data, train-teacher, train, eval, highlight.
//
// Exit codes: 0 success, 2 usage or configuration error (bad flags, missing
// inputs, malformed files), 3 numerical failure (non-finite loss or
// gradient), 1 anything else.
//
// Every subcommand accepts --config FILE with one `key=value` per line (keys
// are long flag names without the dashes, '#' starts a comment). Values given
// on the command line win over the file, which wins over built-in defaults.
//
// Unset artifact paths default to files inside --out-dir, whose own default is
// $DMR_OUTPUT_DIR or the working directory.

#include <iosfwd>
#include <span>
#include <string>

#include "dmr/data.hpp"

namespace dmr {

inline constexpr const char* kOutputDirEnv = "DMR_OUTPUT_DIR";

enum class HighlightFormat { kHtml, kAnsi };

// Renders examples with predicted rationale tokens in bold and gold tokens
// underlined (both styles when both apply). At most `limit` examples.
std::string highlight_document(const Corpus& corpus, std::span<const Mask> predicted,
                               HighlightFormat format, std::size_t limit);

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dmr
