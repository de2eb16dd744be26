"""Octuplet loss for cross-resolution face verification.

The numeric core (distances, mining, loss, verification metrics) is numpy with
numba kernels; set ``OCTUPLET_DISABLE_NUMBA=1`` for the pure numpy path.
Training uses torch.
"""
__version__ = "0.1.0"

from .coremath import (DistanceMetric, cosine_distance, distance, euclidean_distance, l2_normalize,
                       pairwise_distances, rowwise_distances, squared_euclidean_distance)
from .degrade import FaceImage, ResolutionSampler, degrade_batch, degrade_image, degrade_pixels
from .errors import (ConfigError, DataError, DomainError, NumericError, OctupletError,
                     ProtocolError, ShapeError)
from .evaluation import (PairProtocol, RocCurve, VerificationReport, equal_error_rate,
                         evaluate_cross_resolution, evaluate_same_resolution, generate_pairs,
                         kfold_accuracy, roc_curve, tar_at_far)
from .batching import IdentityPool, build_epoch_batches, remaining_capacity
from .mining import hardest_negative, mine_triplet_set
from .octuplet import ABLATION_MASKS, PairedBatch, TermMask, build_octuplet_sets, octuplet_loss
from .triplet import Triplet, enumerate_triplets, triplet_loss
