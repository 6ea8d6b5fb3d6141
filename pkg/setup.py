from setuptools import setup
from pathlib import Path

here = Path(__file__).parent
reqs = here / 'requirements.txt'
install_requires = []
if reqs.exists():
    install_requires = [r.strip() for r in reqs.read_text().splitlines()
                        if r.strip() and not r.strip().startswith('#') and not r.startswith(('pip', 'setuptools', 'pytest'))]

setup(
    name='Domino_Prune',
    version='0.1.0',
    description='Structured channel pruning with Domino saliency over coupled layers',
    py_modules=['domino_prune', 'netgraph', 'depgraph', 'engine', 'saliency', 'domino',
                'pruner', 'model_io', 'fixtures', 'report', 'verify', 'errors'],
    include_package_data=True,
    data_files=[('csv_files', ['csv_files/fixture_training.csv'])],
    install_requires=install_requires,
    extras_require={'test': ['pytest']},
    entry_points={
        'console_scripts': [
            'domino-prune=domino_prune:main',
        ],
    },
)
