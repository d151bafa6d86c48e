from .dataset import (
    Dataset,
    DatasetSplit,
    StationSample,
    StationTable,
    chronological_split,
    default_split_dates,
    load_dataset,
    read_observations,
    read_predictors,
    read_stations,
    save_dataset,
)
from .grid import (
    GridField,
    GridSpec,
    bilinear_interpolate,
    bilinear_weights,
    minmax_normalize,
    minmax_normalize_stack,
    read_grid,
    stack_fields,
    write_grid,
)
from .synth import SynthConfig, synth_generate, variable_names
