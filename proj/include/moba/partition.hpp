#pragma once

#include <cstddef>
#include <vector>

namespace moba {

// Inclusive 1-based token range [first, last] of one KV block.
struct BlockRange {
  std::size_t first = 0;
  std::size_t last = 0;

  std::size_t length() const { return last - first + 1; }
  // 0-based half-open view, convenient for indexing tensors.
  std::size_t begin0() const { return first - 1; }
  std::size_t end0() const { return last; }
  bool contains(std::size_t pos) const { return pos >= first && pos <= last; }
  bool operator==(const BlockRange&) const = default;
};

// Split of a context of N tokens into n = ceil(N / B) contiguous blocks.
// Every block holds B tokens except possibly the last one, which holds
// N mod B tokens when B does not divide N. Positions and block indices in
// this interface are 1-based.
class BlockPartition {
 public:
  BlockPartition() = default;
  BlockPartition(std::size_t context_length, std::size_t block_size);

  std::size_t context_length() const { return context_length_; }
  std::size_t block_size() const { return block_size_; }
  std::size_t num_blocks() const { return ranges_.size(); }
  const std::vector<BlockRange>& ranges() const { return ranges_; }
  const BlockRange& range(std::size_t block) const;

  // Block containing 1-based position `pos`.
  std::size_t block_of(std::size_t pos) const;

  bool operator==(const BlockPartition&) const = default;

 private:
  std::size_t context_length_ = 0;
  std::size_t block_size_ = 0;
  std::vector<BlockRange> ranges_;
};

BlockPartition make_partition(std::size_t context_length, std::size_t block_size);

}  // namespace moba
