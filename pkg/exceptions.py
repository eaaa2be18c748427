from typing import Iterable


class OFDiffError(Exception):
    """Base class for every error raised by the pipeline."""


class ContractError(OFDiffError, ValueError):
    pass


class ShapeError(ContractError):
    pass


class ConfigError(OFDiffError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"invalid config at '{path}': {message}")


class LayoutSaturationError(OFDiffError):
    def __init__(self, canvas_size: int, num_objects_range: tuple, attempts: int):
        self.canvas_size = canvas_size
        self.num_objects_range = num_objects_range
        super().__init__(
            f"layout saturation: could not place a box after {attempts} attempts "
            f"(canvas_size={canvas_size}, num_objects_range={list(num_objects_range)})"
        )


class DatasetIOError(OFDiffError):
    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{message}: {path}")


class CorruptDatasetError(OFDiffError):
    def __init__(self, path, detail: str = ""):
        self.path = str(path)
        super().__init__(f"corrupt dataset at {path}" + (f" ({detail})" if detail else ""))


class DegenerateInstanceError(OFDiffError):
    def __init__(self, scene_id: str, index: int):
        self.scene_id = scene_id
        self.index = index
        super().__init__(f"degenerate instance: scene {scene_id} index {index} has an empty mask crop")


class PoolMissError(OFDiffError):
    def __init__(self, category_id: int):
        self.category_id = category_id
        super().__init__(f"pool miss: no mask pool entries for category {category_id}")


class EmptyCategoryError(OFDiffError):
    def __init__(self, category_ids: Iterable[int]):
        self.category_ids = sorted(category_ids)
        super().__init__(f"empty category: no instances for category ids {self.category_ids}")


class InvariantError(OFDiffError, AssertionError):
    pass


class ScheduleExhaustedError(OFDiffError):
    def __init__(self, n: int, total: int):
        super().__init__(f"schedule exhausted: iteration {n} of {total}")


class MetricError(OFDiffError, ValueError):
    pass


class CheckpointError(OFDiffError):
    pass


class RunRefusedError(OFDiffError):
    pass
