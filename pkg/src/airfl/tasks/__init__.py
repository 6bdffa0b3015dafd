"""Learning tasks and data handling."""

from .idx import load_idx, read_idx, write_idx_images, write_idx_labels
from .linear import (LinearTask, closed_form_optimum, convexity_constants,
                     generate_linear_task, global_loss, minibatch_gradient, pooled_gram)
from .logistic import LogisticTask, generate_logistic_task
from .mlp import MlpTask, generate_blob_mlp_task, mnist_mlp_task
from .partition import Dataset, DataPartition, partition_iid, partition_label_shards

__all__ = [
    "Dataset", "DataPartition", "LinearTask", "LogisticTask", "MlpTask",
    "closed_form_optimum", "convexity_constants", "generate_blob_mlp_task",
    "generate_linear_task", "generate_logistic_task", "global_loss", "load_idx",
    "minibatch_gradient", "mnist_mlp_task", "partition_iid", "partition_label_shards",
    "pooled_gram", "read_idx", "write_idx_images", "write_idx_labels",
]
