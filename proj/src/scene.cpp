#include "toist/scene.hpp"

#include <stdexcept>

namespace toist {

const char* to_string(DescriptionForm form) {
  switch (form) {
    case DescriptionForm::kVerbNoun: return "verb-noun";
    case DescriptionForm::kVerbPronoun: return "verb-pronoun";
    case DescriptionForm::kEmpty: return "empty";
  }
  return "unknown";
}

void TaskDescription::validate(int vocab_size, int max_length) const {
  const std::string where = std::string("task description (") + to_string(form) + ")";
  if (tokens.empty()) throw std::invalid_argument(where + ": no tokens");
  if (length() > max_length)
    throw std::invalid_argument(where + ": " + std::to_string(length()) + " tokens exceeds " +
                                std::to_string(max_length));
  for (int t : tokens)
    if (t < 0 || t >= vocab_size)
      throw std::invalid_argument(where + ": token id " + std::to_string(t) +
                                  " outside vocabulary of " + std::to_string(vocab_size));
  for (int p : special_positions)
    if (p < 0 || p >= length())
      throw std::invalid_argument(where + ": special position " + std::to_string(p) + " out of range");
  switch (form) {
    case DescriptionForm::kVerbPronoun:
      if (special_positions.size() != 1)
        throw std::invalid_argument(where + ": needs exactly one pronoun position");
      break;
    case DescriptionForm::kVerbNoun:
      if (special_positions.empty()) throw std::invalid_argument(where + ": needs a noun position");
      break;
    case DescriptionForm::kEmpty:
      if (length() != 1 || !special_positions.empty())
        throw std::invalid_argument(where + ": must be a single delimiter token");
      break;
  }
}

}  // namespace toist
