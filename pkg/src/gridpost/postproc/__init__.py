"""Forecast models: per-station EMOS and the distributional regression network."""

from .drn import DrnConfig, DrnModel, aggregate_forecasts, drn_predict_aggregate, drn_train, train_one
from .emos import EmosParams, emos_fit, emos_predict
from .features import FeatureLayout, FeatureMatrix, assemble_features, encode_fields, fit_layout
