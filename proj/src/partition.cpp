#include "moba/partition.hpp"

#include <sstream>

#include "moba/errors.hpp"

namespace moba {

BlockPartition::BlockPartition(std::size_t context_length, std::size_t block_size)
    : context_length_(context_length), block_size_(block_size) {
  if (context_length == 0 || block_size == 0) {
    std::ostringstream msg;
    msg << "block partition needs N >= 1 and B >= 1 (got N=" << context_length
        << ", B=" << block_size << ")";
    throw ParameterError(msg.str());
  }
  const std::size_t n = (context_length + block_size - 1) / block_size;
  ranges_.reserve(n);
  for (std::size_t i = 1; i <= n; ++i) {
    const std::size_t first = (i - 1) * block_size + 1;
    const std::size_t last = std::min(i * block_size, context_length);
    ranges_.push_back({first, last});
  }
}

const BlockRange& BlockPartition::range(std::size_t block) const {
  if (block == 0 || block > ranges_.size()) {
    std::ostringstream msg;
    msg << "block index " << block << " outside [1, " << ranges_.size() << "]";
    throw PartitionError(msg.str());
  }
  return ranges_[block - 1];
}

std::size_t BlockPartition::block_of(std::size_t pos) const {
  if (pos == 0 || pos > context_length_) {
    std::ostringstream msg;
    msg << "position " << pos << " outside [1, " << context_length_ << "]";
    throw ParameterError(msg.str());
  }
  return (pos - 1) / block_size_ + 1;
}

BlockPartition make_partition(std::size_t context_length, std::size_t block_size) {
  return BlockPartition(context_length, block_size);
}

}  // namespace moba
