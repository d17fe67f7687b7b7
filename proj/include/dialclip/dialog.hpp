#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dialclip/errors.hpp"

namespace dialclip {

enum class Modality : std::uint8_t { Text = 0, Image = 1 };

inline std::string_view to_string(Modality m) { return m == Modality::Text ? "t" : "v"; }

inline Modality modality_from_string(std::string_view s) {
  if (s == "t") return Modality::Text;
  if (s == "v") return Modality::Image;
  throw InputError("unknown modality '" + std::string(s) + "' (expected \"t\" or \"v\")");
}

enum class Role : std::uint8_t { User = 0, System = 1 };

inline std::string_view to_string(Role r) { return r == Role::User ? "user" : "system"; }

inline Role role_from_string(std::string_view s) {
  if (s == "user") return Role::User;
  if (s == "system") return Role::System;
  throw InputError("unknown role '" + std::string(s) + "'");
}

/// (modality of the current input, modality of the candidate response).
struct RetrievalType {
  Modality input = Modality::Text;
  Modality response = Modality::Text;

  std::size_t index() const {
    return 2 * static_cast<std::size_t>(input) + static_cast<std::size_t>(response);
  }
  std::string name() const {
    return "(" + std::string(to_string(input)) + "," + std::string(to_string(response)) + ")";
  }
  friend bool operator==(const RetrievalType&, const RetrievalType&) = default;
};

inline constexpr std::array<RetrievalType, 4> kAllRetrievalTypes{{
    {Modality::Text, Modality::Text},
    {Modality::Text, Modality::Image},
    {Modality::Image, Modality::Text},
    {Modality::Image, Modality::Image},
}};

/// One dialog turn or response. Exactly one payload is present and it matches
/// the modality; image patches are row-major n_patches × patch_dim.
struct Utterance {
  Modality modality = Modality::Text;
  Role role = Role::User;
  std::optional<std::vector<std::uint32_t>> tokens;
  std::optional<std::vector<double>> patches;

  static Utterance text(Role role, std::vector<std::uint32_t> toks) {
    return {Modality::Text, role, std::move(toks), std::nullopt};
  }
  static Utterance image(Role role, std::vector<double> patch_values) {
    return {Modality::Image, role, std::nullopt, std::move(patch_values)};
  }

  void validate(std::size_t patch_values) const {
    if (modality == Modality::Text) {
      if (!tokens || patches) throw InputError("text utterance must carry tokens only");
    } else {
      if (!patches || tokens) throw InputError("image utterance must carry patches only");
      if (patches->size() != patch_values)
        throw InputError("image utterance has " + std::to_string(patches->size()) +
                         " patch values, expected " + std::to_string(patch_values));
    }
  }

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

enum class Split : std::uint8_t { Train, Dev, Test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "train";
}

inline Split split_from_string(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "dev") return Split::Dev;
  if (s == "test") return Split::Test;
  throw InputError("unknown split '" + std::string(s) + "'");
}

/// A dialog history H plus its ground-truth response. The last turn is the
/// current input I; everything before it is the context C.
struct Dialog {
  std::string id;
  std::vector<Utterance> turns;
  Utterance response;
  // Generator label; only the evaluation pool builder looks at it.
  std::uint32_t topic_id = 0;
  Split split = Split::Train;

  const Utterance& current_input() const {
    if (turns.empty()) throw InputError("dialog " + id + " has no turns");
    return turns.back();
  }
  std::vector<Utterance> context() const {
    if (turns.empty()) throw InputError("dialog " + id + " has no turns");
    return {turns.begin(), turns.end() - 1};
  }
  RetrievalType retrieval_type() const { return {current_input().modality, response.modality}; }

  friend bool operator==(const Dialog&, const Dialog&) = default;
};

}  // namespace dialclip
