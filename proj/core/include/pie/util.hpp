#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace pie {

// FNV-1a over bytes; used for config provenance hashes in output headers.
std::uint64_t fnv1a64(const std::string& bytes);
std::string hash_hex(std::uint64_t h);

// Money formatting with half-up rounding to cents: 98.418 -> "98.42".
std::string format_dollars_cents(double amount);
std::int64_t round_half_up_cents(double amount);
std::string format_cents(std::int64_t cents);

// Shortest round-trip decimal rendering of a double (stable across platforms);
// used for CSV/JSONL payloads so emitted files are byte-reproducible.
std::string format_double(double value);

// Fixed significant-figure formatting for ratio reporting: 41.88 -> "41.9",
// 119.156 -> "119".
std::string format_sig3(double value);

// Index-parallel loop with deterministic result placement: body(i) runs for
// i in [0, n) on up to `threads` workers; callers write into pre-sized slots.
// threads <= 1 runs inline.
void parallel_for(std::size_t n, unsigned threads,
                  const std::function<void(std::size_t)>& body);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& contents);
std::vector<std::string> split_lines(const std::string& text);

}  // namespace pie
