"""Synthetic corpora, motion filtering, bucketing and manifests."""
from .buckets import (
    DEFAULT_BUCKETS, DESK_BUCKETS, Bucket, PlannedBatch, assign_bucket, assign_bucket_index,
    batch_plan, batch_size_for, make_buckets, resize_to_bucket,
)
from .io import ManifestRecord, load_image, load_mask, read_manifest, resolve, save_image, save_mask, write_manifest
from .motion import FramePair, block_motion, cross_transition_pairs, filter_pairs, motion_score, splice
from .scenes import TASKS, SceneSpec, gen_corpus, make_record, moving_clip, render, shape_mask
