#!/usr/bin/env python3
#
# mergeforge documentation build configuration file.

import os
import sys

sys.path.insert(0, os.path.abspath('../src'))

# -- General configuration ------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.intersphinx',
    'sphinx.ext.autosummary',
    'sphinx.ext.napoleon',
    'sphinx.ext.mathjax'
]

autosummary_generate = True
autoclass_content = "both"
numfig = True

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

project = 'mergeforge'
copyright = '2026, the mergeforge developers'
author = 'the mergeforge developers'

version = '0.1.0'
release = '0.1.0'

exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']
pygments_style = 'sphinx'
todo_include_todos = False

intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'numpy': ('https://numpy.org/doc/stable/', None),
}

# -- Options for HTML output ----------------------------------------------

html_theme = "sphinx_rtd_theme"
html_static_path = ['_static']
htmlhelp_basename = 'mergeforge_doc'

# -- Options for manual page output ---------------------------------------

man_pages = [
    (master_doc, 'mergeforge', 'mergeforge Documentation',
     [author], 1)
]
