// Token vocabulary with reserved ids and BOS/EOS-framed captions.

#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace ssr {

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumReserved = 4;

  Vocabulary();

  // Tokens with corpus frequency strictly greater than threshold receive an
  // id; everything else maps to UNK. Id order: count desc, then token asc.
  static Vocabulary build(const std::vector<std::vector<std::string>>& corpus, long threshold);

  int id(const std::string& token) const;  // kUnk when absent
  const std::string& token(int id) const;
  bool contains(const std::string& token) const;
  int size() const { return static_cast<int>(id_to_token_.size()); }
  long threshold() const { return threshold_; }

 private:
  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
  long threshold_ = 0;
};

// Token-id sequence framed as [BOS, w_1 .. w_n, EOS]; n counts content
// tokens only.
struct Caption {
  std::vector<int> ids;

  int length() const { return static_cast<int>(ids.size()) - 2; }
  int content(int j) const { return ids[static_cast<std::size_t>(j) + 1]; }  // j in [0, n)

  static Caption from_ids(std::vector<int> content_ids);
  static Caption from_tokens(const Vocabulary& vocab, const std::vector<std::string>& tokens);
  std::vector<std::string> to_tokens(const Vocabulary& vocab) const;

  // checks BOS/EOS framing, n >= 1, and that no PAD or interior BOS appears
  void validate(int max_len) const;
};

// Keeps the first max_len content tokens.
Caption truncate_caption(const Caption& caption, int max_len);

}  // namespace ssr
