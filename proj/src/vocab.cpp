#include "ssr/vocab.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

namespace ssr {

Vocabulary::Vocabulary() {
  id_to_token_ = {"<PAD>", "<BOS>", "<EOS>", "<UNK>"};
  for (int i = 0; i < kNumReserved; ++i) token_to_id_[id_to_token_[i]] = i;
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& corpus, long threshold) {
  std::map<std::string, long> counts;
  for (const auto& sentence : corpus)
    for (const auto& tok : sentence) ++counts[tok];

  std::vector<std::pair<std::string, long>> kept;
  for (const auto& [tok, count] : counts)
    if (count > threshold) kept.emplace_back(tok, count);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  v.threshold_ = threshold;
  for (const auto& [tok, count] : kept) {
    v.token_to_id_[tok] = static_cast<int>(v.id_to_token_.size());
    v.id_to_token_.push_back(tok);
  }
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("Vocabulary::token: id " + std::to_string(id));
  return id_to_token_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(const std::string& token) const { return token_to_id_.count(token) > 0; }

Caption Caption::from_ids(std::vector<int> content_ids) {
  Caption c;
  c.ids.reserve(content_ids.size() + 2);
  c.ids.push_back(Vocabulary::kBos);
  c.ids.insert(c.ids.end(), content_ids.begin(), content_ids.end());
  c.ids.push_back(Vocabulary::kEos);
  return c;
}

Caption Caption::from_tokens(const Vocabulary& vocab, const std::vector<std::string>& tokens) {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(vocab.id(t));
  return from_ids(std::move(ids));
}

std::vector<std::string> Caption::to_tokens(const Vocabulary& vocab) const {
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(std::max(length(), 0)));
  for (int j = 0; j < length(); ++j) out.push_back(vocab.token(content(j)));
  return out;
}

void Caption::validate(int max_len) const {
  if (ids.size() < 3 || ids.front() != Vocabulary::kBos || ids.back() != Vocabulary::kEos)
    throw std::runtime_error("Caption: expected [BOS, w_1..w_n, EOS] with n >= 1");
  if (length() > max_len)
    throw std::runtime_error("Caption: length " + std::to_string(length()) + " exceeds max " +
                             std::to_string(max_len));
  for (std::size_t k = 1; k + 1 < ids.size(); ++k) {
    if (ids[k] == Vocabulary::kPad) throw std::runtime_error("Caption: interior PAD");
    if (ids[k] == Vocabulary::kBos) throw std::runtime_error("Caption: interior BOS");
    if (ids[k] == Vocabulary::kEos) throw std::runtime_error("Caption: interior EOS");
  }
}

Caption truncate_caption(const Caption& caption, int max_len) {
  if (caption.length() <= max_len) return caption;
  std::vector<int> content(caption.ids.begin() + 1, caption.ids.begin() + 1 + max_len);
  return Caption::from_ids(std::move(content));
}

}  // namespace ssr
