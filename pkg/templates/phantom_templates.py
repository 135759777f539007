import json
import os

from config.settings import TEMPLATE_DIR


def load_template(template_name):
    """
    Load `<template_name>_phantom_template.json` from the templates folder.
    Missing or malformed templates raise, since a phantom cannot be built without one.
    """
    template_path = os.path.join(TEMPLATE_DIR, f"{template_name}_phantom_template.json")
    try:
        with open(template_path, 'r') as file:
            return json.load(file)
    except FileNotFoundError:
        raise FileNotFoundError(f"Template file not found: {template_path}") from None
    except json.JSONDecodeError as e:
        raise ValueError(f"Error decoding JSON from file: {template_path}: {e}") from None


def list_templates():
    return sorted(
        name[:-len('_phantom_template.json')]
        for name in os.listdir(TEMPLATE_DIR)
        if name.endswith('_phantom_template.json')
    )
