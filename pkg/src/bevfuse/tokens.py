from dataclasses import dataclass

import numpy as np

LIDAR = 0
IMAGE = 1


@dataclass
class TokenSequence:
    """Sparse tokens of both modalities, lidar rows first.

    ``coords`` are integer grid coordinates: voxel (x, y, z) for lidar,
    (patch column, patch row, view) for images. ``bev_index`` is the flat
    BEV cell of a lidar token and -1 for image tokens.
    """

    features: np.ndarray
    coords: np.ndarray
    modality: np.ndarray
    bev_index: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.modality = np.asarray(self.modality, dtype=np.uint8)
        self.bev_index = np.asarray(self.bev_index, dtype=np.int64)
        n = len(self.features)
        if not (len(self.coords) == len(self.modality) == len(self.bev_index) == n):
            raise ValueError("token arrays disagree in length")

    def __len__(self):
        return len(self.features)

    @property
    def channels(self):
        return self.features.shape[1]

    @property
    def lidar_idx(self):
        return np.flatnonzero(self.modality == LIDAR)

    @property
    def image_idx(self):
        return np.flatnonzero(self.modality == IMAGE)

    @property
    def num_lidar(self):
        return int((self.modality == LIDAR).sum())

    @property
    def num_image(self):
        return int((self.modality == IMAGE).sum())

    def with_features(self, features):
        return TokenSequence(features, self.coords, self.modality, self.bev_index)

    @classmethod
    def empty(cls, channels):
        return cls(np.zeros((0, channels)), np.zeros((0, 3)), np.zeros(0), np.zeros(0))

    @classmethod
    def concat(cls, *seqs):
        return cls(
            np.concatenate([s.features for s in seqs]),
            np.concatenate([s.coords for s in seqs]),
            np.concatenate([s.modality for s in seqs]),
            np.concatenate([s.bev_index for s in seqs]),
        )
