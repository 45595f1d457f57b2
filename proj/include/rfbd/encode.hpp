#pragma once

#include <vector>

#include "rfbd/nn.hpp"
#include "rfbd/signal.hpp"

namespace rfbd {

// The encoder input contract is a 2xW matrix in either domain. Time-domain
// frames pass through; spectrogram pipelines transform at the model boundary
// so triggers and augmentations always act on the raw signal first.
inline IQFrame to_model_input(const IQFrame& frame, Domain domain) {
  if (domain == Domain::time) return frame;
  if (frame.domain == Domain::spectrogram) return frame;
  return stft_spectrogram(frame);
}

inline Tensor<float> make_batch(const std::vector<const IQFrame*>& frames, Domain domain) {
  if (frames.empty()) throw std::invalid_argument("make_batch: empty batch");
  const int w = frames[0]->width;
  Tensor<float> batch({static_cast<std::int64_t>(frames.size()), 2, w});
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (frames[i]->width != w) throw std::invalid_argument("make_batch: mixed frame widths");
    const IQFrame in = to_model_input(*frames[i], domain);
    float* dst = batch.ptr() + static_cast<std::int64_t>(i) * 2 * w;
    for (std::size_t k = 0; k < in.data.size(); ++k) dst[k] = static_cast<float>(in.data[k]);
  }
  return batch;
}

// Frozen-encoder representations for an arbitrary frame list, batched.
inline Tensor<float> encode_frames(Encoder<float>& enc, const std::vector<const IQFrame*>& frames,
                                   Domain domain, int batch_size = 256) {
  if (frames.empty()) throw std::invalid_argument("encode_frames: empty input");
  Tensor<float> reps({static_cast<std::int64_t>(frames.size()), enc.rep_dim()});
  std::size_t done = 0;
  while (done < frames.size()) {
    const std::size_t n = std::min<std::size_t>(batch_size, frames.size() - done);
    std::vector<const IQFrame*> chunk(frames.begin() + static_cast<std::ptrdiff_t>(done),
                                      frames.begin() + static_cast<std::ptrdiff_t>(done + n));
    const Tensor<float> out = enc.forward(make_batch(chunk, domain));
    std::copy(out.data.begin(), out.data.end(),
              reps.ptr() + static_cast<std::int64_t>(done) * enc.rep_dim());
    done += n;
  }
  return reps;
}

inline std::vector<const IQFrame*> frame_ptrs(const std::vector<IQFrame>& frames) {
  std::vector<const IQFrame*> p;
  p.reserve(frames.size());
  for (const auto& f : frames) p.push_back(&f);
  return p;
}

}  // namespace rfbd
