#pragma once

#include <cstdint>
#include <optional>
#include <unordered_map>

// Tagged-memory machine model: 4-bit allocation tags at 16-byte granularity,
// 4-bit address tags in pointer bits [59:56], synchronous checking.
namespace stacktag::mte {

inline constexpr uint64_t kGranuleBytes = 16;
inline constexpr uint64_t kAddressBits = 56;
inline constexpr uint64_t kAddressMask = (uint64_t{1} << kAddressBits) - 1;
inline constexpr uint64_t kTagShift = 56;
inline constexpr uint64_t kTagMask = uint64_t{0xf} << kTagShift;
inline constexpr uint64_t kTopTagBit = uint64_t{1} << 59;

// Tag families. The default tag doubles as the tag of unallocated stack
// memory, so it must differ from 0b0000 to keep NULL out of the safe set.
inline constexpr uint8_t kSafeDefaultTag = 0b1100;
inline constexpr uint8_t kPtrUnsafeTag = 0b1000;   // safe but pointer-unsafe slots
inline constexpr uint8_t kGuardTag = 0b0101;       // guard granules
inline constexpr uint8_t kWildcardTag = 0b0000;
// Globals live outside the analyzed set and hold data the program may
// round-trip through untrusted memory; their tag keeps the top bit clear so
// tag-forgery clearing is the identity on pointers to them.
inline constexpr uint8_t kGlobalRegionTag = 0b0100;

// Cyclic tags for adjacent unsafe slots. Never 0b0000 (wildcard) and never
// the guard tag, so any neighbour pairing differs.
inline constexpr uint8_t kUnsafeCycle[3] = {0b0001, 0b0010, 0b0011};

struct PointerValue {
  uint64_t raw = 0;

  uint64_t address() const { return raw & kAddressMask; }
  uint8_t address_tag() const { return static_cast<uint8_t>((raw >> kTagShift) & 0xf); }

  friend bool operator==(const PointerValue&, const PointerValue&) = default;
};

PointerValue with_tag(PointerValue p, uint8_t tag);
PointerValue clear_top_tag_bit(PointerValue p);

inline uint64_t granule_index(uint64_t address) { return address / kGranuleBytes; }
inline bool is_granule_aligned(uint64_t address) { return address % kGranuleBytes == 0; }
inline uint64_t round_up_to_granule(uint64_t size) {
  return (size + kGranuleBytes - 1) / kGranuleBytes * kGranuleBytes;
}

// Sparse allocation-tag store. Unmapped granules reject every access,
// including tag reads and writes.
class TagMemory {
 public:
  void map_region(uint64_t address, uint64_t size, uint8_t tag);
  bool is_mapped(uint64_t address) const;
  std::optional<uint8_t> tag_at(uint64_t address) const;
  // Overwrites the tag of every granule overlapping [address, address+size).
  // Returns false when any such granule is unmapped or `address` is not
  // granule-aligned (the machine faults).
  bool set_allocation_tags(uint64_t address, uint64_t size, uint8_t tag);
  // Unchecked single-granule write, used by region mapping and tests.
  void set_tag_unchecked(uint64_t address, uint8_t tag);

  size_t mapped_granules() const { return tags_.size(); }

 private:
  std::unordered_map<uint64_t, uint8_t> tags_;
};

struct MteConfig {
  bool wildcard_enabled = false;  // TCMA analogue for address tag 0b0000
};

enum class Verdict : uint8_t { Allowed, TagMismatch, Unmapped };

struct CheckResult {
  Verdict verdict = Verdict::Allowed;
  uint64_t fault_address = 0;
  uint8_t address_tag = 0;
  uint8_t allocation_tag = 0;

  bool allowed() const { return verdict == Verdict::Allowed; }
};

// Pure access check over a tag-memory snapshot. `via_frame_base` models the
// architecture's unchecked stack-pointer-relative accesses; mapping is still
// required.
CheckResult check_access(const TagMemory& tm, PointerValue p, uint64_t width,
                         const MteConfig& cfg, bool via_frame_base);

}  // namespace stacktag::mte
