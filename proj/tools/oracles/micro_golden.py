# Copyright 2026 The biasattr Authors.
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Recomputes golden micro-model values straight from the weight file.

Shares no code with the C++ forward pass: it parses the MLM1 layout with
struct/numpy and evaluates the network in float64 numpy.

    python3 micro_golden.py tests/data/micro_golden.mlm > tests/data/micro_golden.json
"""

import json
import struct
import sys

import numpy as np


def load(path):
    raw = open(path, "rb").read()
    assert raw[:4] == b"MLM1", "bad magic"
    version, vocab, window, embed, h1, h2 = struct.unpack_from("<6I", raw, 4)
    (seed,) = struct.unpack_from("<Q", raw, 28)
    assert version == 1
    flat = np.frombuffer(raw, dtype="<f8", offset=36)
    shapes = [(vocab, embed), (h1, window * embed), (h1,), (h2, h1), (h2,),
              (vocab, h2), (vocab,)]
    tensors, pos = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        tensors.append(flat[pos:pos + n].reshape(shape))
        pos += n
    assert pos == flat.size
    vocab_tokens = open(path + ".vocab").read().split("\n")
    return dict(window=window, tensors=tensors, seed=seed,
                tokens=[t for t in vocab_tokens if t])


def forward(m, context, mask=None):
    emb, w1, b1, w2, b2, proj, pb = m["tensors"]
    win = m["window"]
    ctx = ([0] * win + list(context))[-win:]
    x = np.concatenate([emb[i] for i in ctx])
    hidden1 = np.tanh(w1 @ x + b1)
    hidden2 = np.tanh(w2 @ hidden1 + b2)
    if mask is not None:
        idx, c = mask
        hidden2 = hidden2.copy()
        hidden2[idx] = c
    logits = proj @ hidden2 + pb
    return hidden1, hidden2, logits


def log_softmax(z):
    top = z.max()
    return z - top - np.log(np.exp(z - top).sum())


def main():
    m = load(sys.argv[1])
    ids = {t: i for i, t in enumerate(m["tokens"])}
    prompt = [ids[w] for w in "a b c".split()]
    sentence = [ids[w] for w in "a b c male".split()]
    mask = ([0, 3, 5], -1.0)
    h1, h2, logits = forward(m, prompt)
    _, _, masked_logits = forward(m, prompt, mask)
    proj, pb = m["tensors"][5], m["tensors"][6]
    groups = [ids["male"], ids["female"]]

    def span_logprobs(mask_):
        out = []
        for t in range(1, len(sentence)):
            _, _, z = forward(m, sentence[:t], mask_)
            out.append(float(log_softmax(z)[sentence[t]]))
        return out

    golden = {
        "prompt_ids": prompt,
        "sentence_ids": sentence,
        "hidden2": h2.tolist(),
        "hidden1": h1.tolist(),
        "logits": logits.tolist(),
        "masked_logits": masked_logits.tolist(),
        "mask": {"idx": mask[0], "c": mask[1]},
        "group_ids": groups,
        "group_rows": proj[groups].tolist(),
        "group_bias": pb[groups].tolist(),
        "span_logprobs": span_logprobs(None),
        "masked_span_logprobs": span_logprobs(mask),
    }
    json.dump(golden, sys.stdout, indent=1)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
