#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Settings Config
INI settings merged over built-in defaults, with BLOCKDIV_<SECTION>_<KEY>
environment overrides loaded through python-dotenv.
"""

import configparser
import logging
import os

from dotenv import load_dotenv

from models.rewrite import MOVES, SynthesisConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "BLOCKDIV_"


class SettingsConfig:
    """manage toolkit settings configuration"""

    # default config
    DEFAULT_CONFIG = {
        'Pipeline': {
            'entry': 'main',
            'n_variants': '2',
            'seed': '0',
            'strategy': 'modulo',
            'max_blocks_per_variant': '',
            'workers': '1',
        },
        'Selection': {
            'type_r_kinds': '',
            'type_r_registers': '',
            'max_gadget_len': '5',
            'risky_call_callees': 'system,execve,execlp,popen,mprotect',
            'type_m_risky': 'strcpy,strcat,memcpy,sprintf,gets,memmove',
            'input_callees': 'read,recv,fgets,getenv',
            'source_registers': 'rdi,rsi',
            'depth_limit': '8',
        },
        'Testgen': {
            'suite_size': '32',
            'fuzz_ratio': '0.25',
            'fuzz_budget': '50000',
        },
        'Synthesis': {
            'n_rewrites': '3',
            'iterations': '1000000',
            'restarts': '8',
            'beta': '1.0',
            'move_weights': ','.join(f'{move}:1' for move in MOVES),
            'flag_weight': '32',
            'fault_penalty': '4096',
            'size_penalty_weight': '8',
            'gadget_weight': '64',
            'patience': '20000',
            'holdout_factor': '2',
        },
    }

    def __init__(self, config_file=None, use_env=True):
        """
        Args:
            config_file: INI file to read; None keeps the defaults
            use_env: apply .env and BLOCKDIV_* environment overrides
        """
        self.config_file = config_file
        self.config = configparser.ConfigParser()
        self.load_config()
        if use_env:
            load_dotenv()
            self._apply_env()

    def load_config(self):
        """load config file, fall back to defaults if not given"""
        if self.config_file:
            if not os.path.exists(self.config_file):
                raise FileNotFoundError(f"config file {self.config_file} does not exist")
            self.config.read(self.config_file, encoding='utf-8')
            self._ensure_defaults()
        else:
            self._create_default_config()

    def _ensure_defaults(self):
        """ensure all default config options exist, but keep existing values"""
        for section, options in self.DEFAULT_CONFIG.items():
            if not self.config.has_section(section):
                self.config.add_section(section)
            # add missing options, do not overwrite existing values
            for key, default_value in options.items():
                if not self.config.has_option(section, key):
                    self.config.set(section, key, default_value)
                    logger.debug("using default [%s] %s = %s", section, key, default_value)

    def _create_default_config(self):
        for section, options in self.DEFAULT_CONFIG.items():
            self.config.add_section(section)
            for key, value in options.items():
                self.config.set(section, key, value)

    def _apply_env(self):
        for section in self.config.sections():
            for key in self.config.options(section):
                name = f"{ENV_PREFIX}{section.upper()}_{key.upper()}"
                if name in os.environ:
                    self.config.set(section, key, os.environ[name])
                    logger.debug("override [%s] %s from %s", section, key, name)

    def save_config(self, path):
        """save the effective config to path"""
        with open(path, 'w', encoding='utf-8') as f:
            self.config.write(f)

    # get and set config value
    def get(self, section, key, fallback=None):
        return self.config.get(section, key, fallback=fallback)

    def set(self, section, key, value):
        if not self.config.has_section(section):
            self.config.add_section(section)
        self.config.set(section, key, '' if value is None else str(value))

    def get_int(self, section, key, fallback=None):
        value = self.get(section, key, '')
        return int(value, 0) if value.strip() else fallback

    def get_float(self, section, key, fallback=None):
        value = self.get(section, key, '')
        return float(value) if value.strip() else fallback

    def get_bool(self, section, key, fallback=False):
        return self.config.getboolean(section, key, fallback=fallback)

    def get_list(self, section, key):
        """comma separated values; empty means none"""
        value = self.get(section, key, '')
        return [item.strip() for item in value.split(',') if item.strip()]

    # shortcut methods
    def get_seed(self):
        return self.get_int('Pipeline', 'seed', 0)

    def get_entry(self):
        return self.get('Pipeline', 'entry', 'main')

    def get_move_weights(self):
        weights = {}
        for item in self.get_list('Synthesis', 'move_weights'):
            move, _, weight = item.partition(':')
            weights[move.strip()] = float(weight or 1)
        return weights

    def synthesis_config(self):
        """SynthesisConfig built from the [Synthesis] section and the pipeline seed"""
        return SynthesisConfig(
            n_rewrites=self.get_int('Synthesis', 'n_rewrites'),
            iterations=self.get_int('Synthesis', 'iterations'),
            restarts=self.get_int('Synthesis', 'restarts'),
            beta=self.get_float('Synthesis', 'beta'),
            move_weights=self.get_move_weights(),
            flag_weight=self.get_int('Synthesis', 'flag_weight'),
            fault_penalty=self.get_int('Synthesis', 'fault_penalty'),
            size_penalty_weight=self.get_int('Synthesis', 'size_penalty_weight'),
            gadget_weight=self.get_int('Synthesis', 'gadget_weight'),
            patience=self.get_int('Synthesis', 'patience'),
            holdout_factor=self.get_int('Synthesis', 'holdout_factor'),
            seed=self.get_seed(),
        )

    def testgen_options(self):
        return {
            'size': self.get_int('Testgen', 'suite_size'),
            'fuzz_ratio': self.get_float('Testgen', 'fuzz_ratio'),
            'fuzz_budget': self.get_int('Testgen', 'fuzz_budget'),
        }

    def selection_options(self):
        return {
            'type_r_kinds': self.get_list('Selection', 'type_r_kinds') or None,
            'type_r_registers': self.get_list('Selection', 'type_r_registers') or None,
            'max_gadget_len': self.get_int('Selection', 'max_gadget_len'),
            'risky_call_callees': tuple(self.get_list('Selection', 'risky_call_callees')),
            'type_m_risky': tuple(self.get_list('Selection', 'type_m_risky')),
            'input_callees': tuple(self.get_list('Selection', 'input_callees')),
            'source_registers': tuple(self.get_list('Selection', 'source_registers')),
            'depth_limit': self.get_int('Selection', 'depth_limit'),
        }
