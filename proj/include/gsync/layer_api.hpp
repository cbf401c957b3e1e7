/*
 Copyright 2026 The gsync Authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

     http://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/
#pragma once

#include <cstring>
#include <span>

#include "gsync/collectives.hpp"
#include "gsync/errors.hpp"
#include "gsync/model_profile.hpp"
#include "gsync/scheduler.hpp"

namespace gsync {

/// How one rank participates in hybrid parallelism: contiguous blocks of g
/// ranks form model groups (model parallelism inside), and the ranks holding
/// the same shard index across blocks form the data peers (data parallelism
/// across). g=1 and g=P recover pure data and pure model parallelism.
struct Distribution {
  int world = 1;
  int group_size = 1;  // g
  int my_rank = 0;
  CommGroup model_group;
  CommGroup data_peers;

  int data_groups() const { return world / group_size; }  // D

  static Distribution build(int world, int group_size, int my_rank) {
    if (group_size < 1 || world % group_size != 0)
      throw InvalidGroupError("group size " + std::to_string(group_size) +
                              " does not divide world " + std::to_string(world));
    if (my_rank < 0 || my_rank >= world) throw InvalidGroupError("rank out of range");
    Distribution d;
    d.world = world;
    d.group_size = group_size;
    d.my_rank = my_rank;
    const int block = (my_rank / group_size) * group_size;
    for (int i = 0; i < group_size; ++i) d.model_group.ranks.push_back(block + i);
    d.model_group.my_index = my_rank % group_size;
    const int shard = my_rank % group_size;
    for (int r = shard; r < world; r += group_size) d.data_peers.ranks.push_back(r);
    d.data_peers.my_index = my_rank / group_size;
    d.model_group.validate();
    d.data_peers.validate();
    return d;
  }
};

/// Communication face of one layer under a distribution. Hides which
/// collectives run: weight-gradient allreduce across data peers, activation
/// allgather / activation-gradient reduce-scatter inside the model group.
/// One outstanding operation per kind; buffers passed to begin() stay
/// untouched by the caller until the matching wait.
class LayerSession {
 public:
  LayerSession(const LayerDescriptor& layer, const Distribution& dist, Runtime& rt, int minibatch,
               Precision wire = Precision::FP32)
      : layer_(layer), dist_(dist), rt_(&rt), minibatch_(minibatch), wire_(wire) {
    if (minibatch < 1) throw ConfigError("minibatch must be >= 1");
    if (layer.parameterized() && dist.group_size > 1) {
      if (layer.param_count % dist.group_size != 0)
        throw IndivisibleShardError("layer " + std::to_string(layer.id) + ": param_count " +
                                    std::to_string(layer.param_count) + " not divisible by g=" +
                                    std::to_string(dist.group_size));
      if (layer.out_channels % dist.group_size != 0)
        throw IndivisibleShardError("layer " + std::to_string(layer.id) + ": K " +
                                    std::to_string(layer.out_channels) + " not divisible by g=" +
                                    std::to_string(dist.group_size));
    }
  }

  const LayerDescriptor& layer() const { return layer_; }
  const Distribution& distribution() const { return dist_; }

  std::size_t wgrad_shard_elems() const {
    return static_cast<std::size_t>(layer_.param_count) / dist_.group_size;
  }
  std::size_t activation_full_elems() const {
    return static_cast<std::size_t>(minibatch_) *
           static_cast<std::size_t>(layer_.activation_elems_per_sample());
  }
  std::size_t activation_block_elems() const {
    return activation_full_elems() / dist_.group_size;
  }
  /// Where this rank's block lives inside a gathered / reduce-scattered
  /// activation buffer.
  Segment activation_shard() const {
    return ring_segment(activation_full_elems(), dist_.group_size, dist_.model_group.my_index);
  }

  /// Allgather of forward activations across the model group, Activation
  /// priority. No-op (immediately done) when g=1 apart from the local copy.
  /// Empty spans run the operation metadata-only.
  Handle forward_activations_begin(std::span<const float> local_block, std::span<float> gathered) {
    require_idle(activation_handle_, "activation");
    if (!gathered.empty()) {
      if (local_block.size() != activation_block_elems() ||
          gathered.size() != activation_full_elems())
        throw LengthMismatchError("forward_activations_begin: bad buffer sizes");
      const Segment mine = activation_shard();
      std::memcpy(gathered.data() + mine.offset_elems, local_block.data(),
                  mine.elems * sizeof(float));
    }
    if (dist_.group_size == 1) return Handle{};
    CollectiveDesc desc;
    desc.kind = CollectiveKind::Allgather;
    desc.wire = wire_;
    desc.group = dist_.model_group;
    desc.elem_count = activation_full_elems();
    desc.op = ReduceOp::Sum;
    desc.priority = {PriorityClassKind::Activation, layer_.id};
    desc.buffer = gathered.empty() ? nullptr : gathered.data();
    desc.user_key = user_key;
    activation_handle_ = rt_->submit(desc);
    return activation_handle_;
  }

  CompletionStatus forward_activations_wait() { return finish(activation_handle_); }

  /// Ring allreduce of the local weight-gradient shard across data peers,
  /// WeightGradient priority keyed by layer id.
  Handle backward_wgrad_begin(std::span<float> wgrad_shard) {
    require_idle(wgrad_handle_, "wgrad");
    if (!wgrad_shard.empty() && wgrad_shard.size() != wgrad_shard_elems())
      throw LengthMismatchError("backward_wgrad_begin: bad shard size");
    if (dist_.data_groups() == 1 || wgrad_shard_elems() == 0) return Handle{};
    CollectiveDesc desc;
    desc.kind = CollectiveKind::Allreduce;
    desc.wire = wire_;
    desc.group = dist_.data_peers;
    desc.elem_count = wgrad_shard_elems();
    desc.op = ReduceOp::Sum;
    desc.priority = {PriorityClassKind::WeightGradient, layer_.id};
    desc.buffer = wgrad_shard.empty() ? nullptr : wgrad_shard.data();
    desc.user_key = user_key;
    wgrad_handle_ = rt_->submit(desc);
    return wgrad_handle_;
  }

  CompletionStatus wgrad_wait() { return finish(wgrad_handle_); }

  /// Reduce-scatter of activation gradients across the model group,
  /// Activation priority; the local result is the activation_shard() segment
  /// of the buffer, in place.
  Handle backward_inputgrad_begin(std::span<float> activation_grads) {
    require_idle(activation_handle_, "activation");
    if (!activation_grads.empty() && activation_grads.size() != activation_full_elems())
      throw LengthMismatchError("backward_inputgrad_begin: bad buffer size");
    if (dist_.group_size == 1) return Handle{};
    CollectiveDesc desc;
    desc.kind = CollectiveKind::ReduceScatter;
    desc.wire = wire_;
    desc.group = dist_.model_group;
    desc.elem_count = activation_full_elems();
    desc.op = ReduceOp::Sum;
    desc.priority = {PriorityClassKind::Activation, layer_.id};
    desc.buffer = activation_grads.empty() ? nullptr : activation_grads.data();
    desc.user_key = user_key;
    activation_handle_ = rt_->submit(desc);
    return activation_handle_;
  }

  CompletionStatus backward_inputgrad_wait() { return finish(activation_handle_); }

  /// Hands the outstanding handle to an external driver (the simulator's
  /// iteration engine completes waits through the event loop instead of
  /// blocking here).
  Handle take_wgrad_handle() { return take(wgrad_handle_); }
  Handle take_activation_handle() { return take(activation_handle_); }

  int user_key = -1;  // forwarded into CollectiveDesc::user_key

 private:
  static void require_idle(const Handle& h, const char* what) {
    if (h.valid())
      throw Error(std::string("layer session already has an outstanding ") + what + " operation");
  }
  static Handle take(Handle& h) {
    Handle out = h;
    h = Handle{};
    return out;
  }
  CompletionStatus finish(Handle& h) {
    if (!h.valid()) return {};
    const Handle taken = take(h);
    return rt_->wait(taken);
  }

  LayerDescriptor layer_;
  Distribution dist_;
  Runtime* rt_;
  int minibatch_;
  Precision wire_ = Precision::FP32;
  Handle wgrad_handle_{};
  Handle activation_handle_{};
};

}  // namespace gsync
