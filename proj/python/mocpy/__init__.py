"""Multi-category object counting toolkit."""

from ._core import (
    DimensionError,
    Model,
    NumericalError,
    ParseError,
    ValidationError,
    build_report,
    category_weights,
    count_from_density,
    counting_loss,
    counts,
    gaussian_kernel,
    generate_gt,
    gradcheck_units,
    group_to_moc6,
    moc6_categories,
    moc6_taxonomy,
    moc14_categories,
    render_channel,
    report_csv,
    run_gradcheck,
    similarity_matrix,
    spatial_contrast_loss,
    synth_scene,
    total_loss,
)

__all__ = [
    "DimensionError",
    "Model",
    "NumericalError",
    "ParseError",
    "ValidationError",
    "build_report",
    "category_weights",
    "count_from_density",
    "counting_loss",
    "counts",
    "gaussian_kernel",
    "generate_gt",
    "gradcheck_units",
    "group_to_moc6",
    "moc6_categories",
    "moc6_taxonomy",
    "moc14_categories",
    "render_channel",
    "report_csv",
    "run_gradcheck",
    "similarity_matrix",
    "spatial_contrast_loss",
    "synth_scene",
    "total_loss",
]
