#include "stacktag/mte.hpp"

namespace stacktag::mte {

PointerValue with_tag(PointerValue p, uint8_t tag) {
  p.raw = (p.raw & ~kTagMask) | (static_cast<uint64_t>(tag & 0xf) << kTagShift);
  return p;
}

PointerValue clear_top_tag_bit(PointerValue p) {
  p.raw &= ~kTopTagBit;
  return p;
}

void TagMemory::map_region(uint64_t address, uint64_t size, uint8_t tag) {
  if (size == 0) return;
  uint64_t first = granule_index(address);
  uint64_t last = granule_index(address + size - 1);
  for (uint64_t g = first; g <= last; ++g) tags_[g] = tag & 0xf;
}

bool TagMemory::is_mapped(uint64_t address) const {
  return tags_.contains(granule_index(address));
}

std::optional<uint8_t> TagMemory::tag_at(uint64_t address) const {
  auto it = tags_.find(granule_index(address));
  if (it == tags_.end()) return std::nullopt;
  return it->second;
}

bool TagMemory::set_allocation_tags(uint64_t address, uint64_t size, uint8_t tag) {
  if (!is_granule_aligned(address)) return false;
  uint64_t covered = round_up_to_granule(size);
  // Verify the whole range is mapped before mutating anything, so a fault
  // leaves the tag state untouched.
  for (uint64_t a = address; a < address + covered; a += kGranuleBytes) {
    if (!tags_.contains(granule_index(a))) return false;
  }
  for (uint64_t a = address; a < address + covered; a += kGranuleBytes) {
    tags_[granule_index(a)] = tag & 0xf;
  }
  return true;
}

void TagMemory::set_tag_unchecked(uint64_t address, uint8_t tag) {
  tags_[granule_index(address)] = tag & 0xf;
}

CheckResult check_access(const TagMemory& tm, PointerValue p, uint64_t width,
                         const MteConfig& cfg, bool via_frame_base) {
  CheckResult r;
  r.address_tag = p.address_tag();
  uint64_t addr = p.address();
  uint64_t end = addr + (width == 0 ? 1 : width) - 1;
  for (uint64_t g = granule_index(addr); g <= granule_index(end); ++g) {
    auto it_addr = g * kGranuleBytes;
    auto tag = tm.tag_at(it_addr);
    if (!tag) {
      r.verdict = Verdict::Unmapped;
      r.fault_address = it_addr > addr ? it_addr : addr;
      return r;
    }
    if (via_frame_base) continue;
    if (cfg.wildcard_enabled && r.address_tag == kWildcardTag) continue;
    if (*tag != r.address_tag) {
      r.verdict = Verdict::TagMismatch;
      r.fault_address = it_addr > addr ? it_addr : addr;
      r.allocation_tag = *tag;
      return r;
    }
    r.allocation_tag = *tag;
  }
  r.verdict = Verdict::Allowed;
  return r;
}

}  // namespace stacktag::mte
