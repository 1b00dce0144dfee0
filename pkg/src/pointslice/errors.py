"""Exception hierarchy shared by every module."""


class PointSliceError(Exception):
    pass


class DuplicateCoordinate(PointSliceError, ValueError):
    def __init__(self, row, coord):
        self.row = int(row)
        self.coord = tuple(int(c) for c in coord)
        super().__init__(f"duplicate coordinate {self.coord} at row {self.row}")


class OutOfBounds(PointSliceError, ValueError):
    def __init__(self, coord, bound):
        self.coord = tuple(int(c) for c in coord)
        self.bound = tuple(int(b) for b in bound)
        super().__init__(f"coordinate {self.coord} outside bound {self.bound}")


class ShapeMismatch(PointSliceError, ValueError):
    pass


class OracleSizeExceeded(PointSliceError, ValueError):
    pass


class ComponentOverflow(PointSliceError, ValueError):
    pass


class EmptyBatch(PointSliceError, ValueError):
    pass


class InvalidSpec(PointSliceError, ValueError):
    pass


class ChannelMismatch(PointSliceError, ValueError):
    pass


class MissingSliceHeight(PointSliceError, ValueError):
    pass


class IndivisibleBatch(PointSliceError, ValueError):
    pass


class EvenKernel(PointSliceError, ValueError):
    pass


class GeometryMismatch(PointSliceError, ValueError):
    pass


class MissingPairedActiveSet(PointSliceError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class IncompleteWeights(PointSliceError, KeyError):
    def __init__(self, layer):
        self.layer = layer
        super().__init__(layer)

    def __str__(self):
        return f"missing weights for layer {self.layer!r}"


class WeightFormatError(PointSliceError, ValueError):
    pass


class BadMagic(WeightFormatError):
    pass


class TruncatedFile(WeightFormatError):
    pass


class DuplicateTensorName(WeightFormatError):
    pass


class ConfigError(PointSliceError, ValueError):
    pass


class ConfigIncompatible(ConfigError):
    pass


class PointFileError(PointSliceError, ValueError):
    pass
