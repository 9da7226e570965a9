#include "stacktag/instrument.hpp"

#include <algorithm>
#include <cassert>
#include <stdexcept>

namespace stacktag::instrument {

using namespace stacktag::ir;
namespace an = stacktag::analysis;

namespace {

bool needs_tag_isolation(const an::SafetyClass& sc) {
  switch (sc.cls) {
    case an::Safety::Implicit: return false;
    case an::Safety::Provable: return !sc.pointer_safe;
    case an::Safety::Guarded: return true;
    case an::Safety::Unsafe: return true;
  }
  return true;
}

uint8_t class_tag(const an::SafetyClass& sc, uint32_t& unsafe_cycle) {
  if (sc.cls == an::Safety::Unsafe) {
    uint8_t t = mte::kUnsafeCycle[unsafe_cycle % 3];
    ++unsafe_cycle;
    return t;
  }
  return sc.pointer_safe ? mte::kSafeDefaultTag : mte::kPtrUnsafeTag;
}

}  // namespace

const FrameLayout* TagPlan::frame_for(std::string_view function) const {
  for (const auto& fr : frames) {
    if (fr.function == function) return &fr;
  }
  return nullptr;
}

std::optional<uint8_t> TagPlan::tag_of(std::string_view function, std::string_view alloca) const {
  const FrameLayout* fr = frame_for(function);
  if (!fr) return std::nullopt;
  for (const auto& s : fr->slots) {
    if (!s.is_guard && s.name == alloca) return s.tag;
  }
  return std::nullopt;
}

FrameLayout layout_frame(const Program& p, uint32_t func_index,
                         const an::AnalysisResult& result, const InstrumentOptions& opts) {
  const Function& f = p.functions[func_index];
  FrameLayout layout;
  layout.function = f.name;
  layout.func = func_index;

  const uint64_t guard_bytes = mte::kGranuleBytes * std::max<uint32_t>(1, opts.guard_width_granules);

  std::vector<FrameSlot> default_group;
  std::vector<FrameSlot> tagged_group;
  uint32_t unsafe_cycle = 0;

  for (const auto& b : f.blocks) {
    for (const auto& inst : b.body) {
      const auto* a = std::get_if<Alloca>(&inst);
      if (!a) continue;
      const an::AllocaReport* rep = result.find_alloca(func_index, a->result);
      assert(rep != nullptr);
      if (a->is_dynamic()) {
        layout.dynamic_allocas.push_back(a->result);
        layout.dynamic_tags[a->result] = class_tag(rep->safety, unsafe_cycle);
        layout.needs_reset_tags = true;
        continue;
      }
      FrameSlot slot;
      slot.name = f.value_names[a->result];
      slot.value = a->result;
      slot.size = a->size;
      slot.safety = rep->safety;
      if (needs_tag_isolation(rep->safety)) {
        slot.padded_size = mte::round_up_to_granule(a->size);
        slot.align = static_cast<uint32_t>(mte::kGranuleBytes);
        slot.tag = class_tag(rep->safety, unsafe_cycle);
        tagged_group.push_back(std::move(slot));
      } else {
        slot.padded_size = a->size;
        slot.align = a->align;
        slot.tag = mte::kSafeDefaultTag;
        default_group.push_back(std::move(slot));
      }
    }
  }

  // Guard insertion around guarded slots whose neighbour would carry the
  // same tag. Slots outside the tagged group and the frame edges behave as
  // default-tagged memory.
  std::vector<FrameSlot> final_tagged;
  uint32_t guard_counter = 0;
  auto make_guard = [&]() {
    FrameSlot g;
    g.name = "__guard" + std::to_string(guard_counter++);
    g.is_guard = true;
    g.size = guard_bytes;
    g.padded_size = guard_bytes;
    g.align = static_cast<uint32_t>(mte::kGranuleBytes);
    g.tag = mte::kGuardTag;
    g.safety = {an::Safety::Unsafe, false};
    return g;
  };
  for (size_t i = 0; i < tagged_group.size(); ++i) {
    FrameSlot& slot = tagged_group[i];
    if (slot.safety.cls == an::Safety::Guarded) {
      uint8_t above = final_tagged.empty() ? mte::kSafeDefaultTag : final_tagged.back().tag;
      if (above == slot.tag) final_tagged.push_back(make_guard());
    }
    final_tagged.push_back(slot);
    if (slot.safety.cls == an::Safety::Guarded) {
      uint8_t below =
          (i + 1 < tagged_group.size()) ? tagged_group[i + 1].tag : mte::kSafeDefaultTag;
      if (below == slot.tag) final_tagged.push_back(make_guard());
    }
  }

  layout.slots = std::move(default_group);
  for (auto& s : final_tagged) layout.slots.push_back(std::move(s));

  // Offsets via the same downward bump allocation the machine performs.
  uint64_t cursor = 0;  // bytes below the (16-aligned) frame base
  for (auto& s : layout.slots) {
    uint64_t addr_down = cursor + s.padded_size;  // candidate distance to slot start
    // Aligning the slot start downward can only increase the distance.
    uint64_t rem = addr_down % s.align;
    if (rem != 0) addr_down += s.align - rem;
    s.offset = addr_down;
    cursor = addr_down;
  }
  layout.static_bytes = cursor;
  layout.needs_reset_tags = layout.needs_reset_tags || f.reset_tags;
  return layout;
}

TagPlan build_tag_plan(const Program& p, const an::AnalysisResult& result,
                       const InstrumentOptions& opts) {
  TagPlan plan;
  for (uint32_t i = 0; i < p.functions.size(); ++i) {
    plan.frames.push_back(layout_frame(p, i, result, opts));
  }
  plan.tfp_sites = result.tfp_sites;
  return plan;
}

std::vector<std::string> validate_tag_plan(const TagPlan& plan) {
  std::vector<std::string> problems;
  for (const auto& fr : plan.frames) {
    for (size_t i = 0; i < fr.slots.size(); ++i) {
      const FrameSlot& s = fr.slots[i];
      bool tagged = s.is_guard || needs_tag_isolation(s.safety);
      if (s.tag == 0) {
        problems.push_back(fr.function + "/" + s.name + ": slot uses the wildcard tag");
      }
      if (tagged) {
        if (s.offset % mte::kGranuleBytes != 0 || s.padded_size % mte::kGranuleBytes != 0) {
          problems.push_back(fr.function + "/" + s.name + ": tagged slot not granule aligned");
        }
      }
      if (!s.is_guard && s.safety.cls == an::Safety::Guarded) {
        uint8_t above = i == 0 ? mte::kSafeDefaultTag : fr.slots[i - 1].tag;
        // The slot group boundary behaves as default-tag memory; slots in the
        // default group genuinely carry the default tag, so indexing is safe.
        uint8_t below =
            (i + 1 < fr.slots.size()) ? fr.slots[i + 1].tag : mte::kSafeDefaultTag;
        if (above == s.tag || below == s.tag) {
          problems.push_back(fr.function + "/" + s.name + ": guarded slot has same-tag neighbour");
        }
      }
      if (!s.is_guard && s.safety.cls == an::Safety::Unsafe && i + 1 < fr.slots.size()) {
        const FrameSlot& n = fr.slots[i + 1];
        if (!n.is_guard && n.safety.cls == an::Safety::Unsafe && n.tag == s.tag) {
          problems.push_back(fr.function + "/" + s.name + ": adjacent unsafe slots share a tag");
        }
      }
    }
    for (const auto& [vid, tag] : fr.dynamic_tags) {
      if ((tag & 0b1000) != 0) {
        problems.push_back(fr.function + ": dynamic alloca tagged outside the unsafe family");
      }
    }
  }
  return problems;
}

// ---- program rewriting ----

namespace {

// Replaces every use of `from` with `to`; comparisons can be excluded so
// sentinel checks keep reading the unmodified value.
void replace_uses(Function& g, ValueId from, ValueId to, bool skip_cmp) {
  for (auto& b : g.blocks) {
    for (auto& phi : b.phis) {
      for (auto& [label, op] : phi.incoming) {
        if (op.is_value() && op.value == from) op.value = to;
      }
    }
    for (auto& inst : b.body) {
      if (skip_cmp && std::holds_alternative<Cmp>(inst)) continue;
      for_each_operand(inst, [&](Operand& op) {
        if (op.is_value() && op.value == from) op.value = to;
      });
    }
    std::visit(
        [&](auto& t) {
          using T = std::decay_t<decltype(t)>;
          if constexpr (std::is_same_v<T, CondBr>) {
            if (t.cond.is_value() && t.cond.value == from) t.cond.value = to;
          } else if constexpr (std::is_same_v<T, Ret>) {
            if (t.value && t.value->is_value() && t.value->value == from) t.value->value = to;
          }
        },
        b.term);
  }
}

struct FunctionRewriter {
  const Program& p;
  uint32_t func;
  Function& g;
  const an::AnalysisResult& analysis;
  const FrameLayout& layout;

  void run() {
    apply_tfp();
    apply_layout_and_tagging();
    apply_dynamic_tagging();
    apply_returns();
  }

  void apply_tfp() {
    // Per-block sites in reverse order so earlier indices stay valid.
    for (uint32_t bi = 0; bi < g.blocks.size(); ++bi) {
      std::vector<an::TfpSiteReport> sites;
      for (const auto& site : analysis.tfp_sites) {
        if (site.func == func && site.block == bi) sites.push_back(site);
      }
      std::sort(sites.begin(), sites.end(),
                [](const auto& a, const auto& b) { return a.index > b.index; });
      auto& body = g.blocks[bi].body;
      for (const auto& site : sites) {
        switch (site.action) {
          case an::TfpAction::None:
            break;
          case an::TfpAction::HardenGep: {
            auto* gep = std::get_if<Gep>(&body[site.index]);
            assert(gep != nullptr);
            gep->fix_tag = true;
            break;
          }
          case an::TfpAction::UntagCast: {
            const auto* cast = std::get_if<IntToPtr>(&body[site.index]);
            assert(cast != nullptr);
            ValueId orig = cast->result;
            ValueId enforced = g.new_value(g.value_names[orig] + ".untag");
            replace_uses(g, orig, enforced, /*skip_cmp=*/false);
            body.insert(body.begin() + site.index + 1,
                        ClearTopTagBit{enforced, Operand::val(orig)});
            break;
          }
          case an::TfpAction::TfpLoad:
          case an::TfpAction::ClearLoaded: {
            const auto* load = std::get_if<Load>(&body[site.index]);
            assert(load != nullptr && load->kind == Kind::Ptr);
            ValueId orig = load->result;
            Operand src = load->addr;
            int64_t src_off = load->offset;
            ValueId enforced = g.new_value(g.value_names[orig] + ".tfp");
            replace_uses(g, orig, enforced, /*skip_cmp=*/true);
            Instruction inserted;
            if (site.action == an::TfpAction::TfpLoad) {
              inserted = TfpLoad{enforced, Operand::val(orig), src, src_off};
            } else {
              inserted = ClearTopTagBit{enforced, Operand::val(orig)};
            }
            body.insert(body.begin() + site.index + 1, std::move(inserted));
            break;
          }
        }
      }
    }
  }

  void apply_layout_and_tagging() {
    if (g.blocks.empty()) return;
    auto& entry = g.blocks[0];

    // Pull the original static allocas out of the entry block.
    std::map<ValueId, Alloca> originals;
    std::vector<Instruction> rest;
    for (auto& inst : entry.body) {
      if (const auto* a = std::get_if<Alloca>(&inst)) {
        if (!a->is_dynamic()) {
          originals[a->result] = *a;
          continue;
        }
      }
      rest.push_back(std::move(inst));
    }

    // Reassemble the entry block first (allocas in layout order, then the
    // remaining body), so the later renames see every use.
    std::vector<Instruction> head;
    for (const auto& slot : layout.slots) {
      if (slot.is_guard) {
        ValueId vid = g.new_value(slot.name);
        Alloca a;
        a.result = vid;
        a.size = slot.padded_size;
        a.align = slot.align;
        head.push_back(a);
        guard_values.emplace_back(vid, slot.padded_size);
        continue;
      }
      Alloca a = originals.at(slot.value);
      a.size = slot.padded_size;
      a.align = slot.align;
      head.push_back(a);
    }
    size_t n_allocas = head.size();
    std::vector<Instruction> body;
    body.reserve(head.size() + rest.size());
    for (auto& i : head) body.push_back(std::move(i));
    for (auto& i : rest) body.push_back(std::move(i));
    entry.body = std::move(body);

    std::vector<Instruction> tagging;
    size_t guard_i = 0;
    for (const auto& slot : layout.slots) {
      if (slot.is_guard) {
        ValueId vid = guard_values[guard_i++].first;
        ValueId tagged = g.new_value(slot.name + ".tag");
        tagging.push_back(TagPtr{tagged, Operand::val(vid), slot.tag});
        tagging.push_back(SetTag{Operand::val(tagged),
                                 Operand::immediate(static_cast<int64_t>(slot.padded_size))});
        continue;
      }
      if (slot.needs_settag()) {
        ValueId tagged = g.new_value(slot.name + ".tag");
        replace_uses(g, slot.value, tagged, /*skip_cmp=*/false);
        tagging.push_back(TagPtr{tagged, Operand::val(slot.value), slot.tag});
        tagging.push_back(SetTag{Operand::val(tagged),
                                 Operand::immediate(static_cast<int64_t>(slot.padded_size))});
        reset_slots.emplace_back(slot.value, slot.padded_size);
      }
    }
    entry.body.insert(entry.body.begin() + static_cast<ptrdiff_t>(n_allocas),
                      tagging.begin(), tagging.end());
  }

  void apply_dynamic_tagging() {
    if (layout.dynamic_allocas.empty()) return;
    g.reset_tags = true;
    for (ValueId vid : layout.dynamic_allocas) {
      // Find the alloca by identity: indices may have shifted.
      for (auto& b : g.blocks) {
        for (size_t k = 0; k < b.body.size(); ++k) {
          auto* a = std::get_if<Alloca>(&b.body[k]);
          if (!a || a->result != vid || !a->is_dynamic()) continue;
          a->align = static_cast<uint32_t>(mte::kGranuleBytes);
          uint8_t tag = layout.dynamic_tags.at(vid);
          const std::string& name = g.value_names[vid];
          ValueId tagged = g.new_value(name + ".tag");
          replace_uses(g, vid, tagged, /*skip_cmp=*/false);
          ValueId size_val = g.new_value(name + ".bytes");
          Operand count = *a->count;
          int64_t elem = static_cast<int64_t>(a->size);
          std::vector<Instruction> seq;
          seq.push_back(IntOp{size_val, IntOpKind::Mul, count, Operand::immediate(elem)});
          seq.push_back(TagPtr{tagged, Operand::val(vid), tag});
          seq.push_back(SetTag{Operand::val(tagged), Operand::val(size_val)});
          b.body.insert(b.body.begin() + k + 1, seq.begin(), seq.end());
          break;
        }
      }
    }
  }

  void apply_returns() {
    bool use_retag = g.reset_tags || layout.needs_reset_tags;
    if (use_retag) g.reset_tags = true;
    for (auto& b : g.blocks) {
      if (!std::holds_alternative<Ret>(b.term)) continue;
      if (use_retag) {
        b.body.push_back(RetagFrame{});
        continue;
      }
      for (const auto& [vid, padded] : reset_slots) {
        ValueId rst = g.new_value(g.value_names[vid] + ".rst");
        b.body.push_back(TagPtr{rst, Operand::val(vid), mte::kSafeDefaultTag});
        b.body.push_back(SetTag{Operand::val(rst), Operand::immediate(static_cast<int64_t>(padded))});
      }
      for (const auto& [vid, padded] : guard_values) {
        ValueId rst = g.new_value(g.value_names[vid] + ".rst");
        b.body.push_back(TagPtr{rst, Operand::val(vid), mte::kSafeDefaultTag});
        b.body.push_back(SetTag{Operand::val(rst), Operand::immediate(static_cast<int64_t>(padded))});
      }
    }
  }

  std::vector<std::pair<ValueId, uint64_t>> reset_slots;   // tagged slots (value, padded size)
  std::vector<std::pair<ValueId, uint64_t>> guard_values;  // guard allocas
};

}  // namespace

InstrumentResult instrument_program(const Program& p, const an::AnalysisResult& result,
                                    const InstrumentOptions& opts) {
  if (has_instrumentation_ops(p)) {
    throw std::invalid_argument("program already contains instrumentation ops");
  }
  InstrumentResult out;
  out.plan = build_tag_plan(p, result, opts);
  out.program = p;
  for (uint32_t i = 0; i < out.program.functions.size(); ++i) {
    FunctionRewriter rw{p, i, out.program.functions[i], result, out.plan.frames[i]};
    rw.run();
  }
  return out;
}

}  // namespace stacktag::instrument
