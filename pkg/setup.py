from setuptools import setup

setup(
    name="noisy_annotation_refinement",
    version="0.1.0",
    py_modules=[
        "center_matching",
        "cinj",
        "cli",
        "config",
        "core_types",
        "geometry",
        "main",
        "metrics",
        "noise_injector",
        "refine_pipeline",
        "sim_detector",
        "synthetic",
        "utils",
    ],
    install_requires=[
        "click",
        "numpy",
    ],
    entry_points={"console_scripts": ["noisyanno=cli:main"]},
)
