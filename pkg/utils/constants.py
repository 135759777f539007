"""
Project-wide constants: exit codes, physical defaults, file names.
"""

# CLI exit codes
EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_INTERNAL_ERROR = 3

# Tensor forward model defaults (mm^2/s, unitless)
LAMBDA_PARALLEL = 1.7e-3
LAMBDA_PERPENDICULAR = 0.3e-3
S0 = 1000.0

# Default acquisition: 32 DW directions at b=1000 plus 2 b0
DEFAULT_BVALUE = 1000.0
DEFAULT_N_DIRECTIONS = 32
DEFAULT_N_B0 = 2
GRADIENT_TABLE_SEED = 20070101

# Phantom directory layout
PHANTOM_FILES = {
    'dwi': 'dwi.json',
    'wm_mask': 'wm_mask.json',
    'bundle_masks': 'bundle_masks.json',
    'rois': 'rois.json',
    'gt_tck': 'gt.tck',
    'gt_native': 'gt_tractogram.json',
    'phantom': 'phantom.json',
    'sh': 'sh.json',
}

VALUE_KINDS = ('scalar', 'sh', 'dwi', 'labels')


def get_value_kind(tag: str) -> tuple:
    """
    Split a container value-kind tag such as 'sh:28' into ('sh', 28).
    'scalar' has one channel.
    """
    kind, _, count = tag.partition(':')
    if kind not in VALUE_KINDS:
        raise ValueError(f"Unknown value kind '{tag}'")
    if kind == 'scalar':
        if count:
            raise ValueError(f"Value kind 'scalar' takes no channel count, got '{tag}'")
        return kind, 1
    if not count.isdigit() or int(count) < 1:
        raise ValueError(f"Value kind '{tag}' needs a positive channel count")
    return kind, int(count)
