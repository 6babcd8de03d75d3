#!/usr/bin/env python3
# -*- coding: utf-8 -*-
# Copyright (C) 2024 Vasiliy Stelmachenok <ventureo@yandex.ru>
#
# This program is free software; you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation; either version 2 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License along
# with this program; if not, write to the Free Software Foundation, Inc.,
# 51 Franklin Street, Fifth Floor, Boston, MA 02110-1301 USA.

import logging
from sqlite3 import Error, connect
from typing import Optional, Tuple


class SurfaceCache():
    """
    Scores of already evaluated grid points, keyed by run and coefficients.

    Database failures are logged and treated as a miss.
    """

    def __init__(self, path):
        self.__path = path
        self.__logger = logging.getLogger(self.__class__.__name__)

    def create(self) -> bool:
        try:
            with connect(self.__path) as con:
                cursor = con.cursor()
                cursor.execute(
                    "CREATE TABLE IF NOT EXISTS surface("
                    "run_key NOT NULL, c_x NOT NULL, c_eps NOT NULL, "
                    "tc NOT NULL, iq NOT NULL, "
                    "PRIMARY KEY (run_key, c_x, c_eps))"
                )
                con.commit()

            return True
        except Error as e:
            self.__logger.error("Can't initialize the surface cache: %s", e)

        return False

    def get(self, run_key: str, c_x: float, c_eps: float) -> Optional[Tuple[float, float]]:
        try:
            with connect(self.__path) as con:
                cursor = con.cursor()
                row = cursor.execute(
                    "SELECT tc, iq FROM surface WHERE run_key = ? AND c_x = ? AND c_eps = ?",
                    (run_key, c_x, c_eps)
                ).fetchone()
        except Error as e:
            self.__logger.error("Can't read the surface cache: %s", e)
            return None

        if row is None:
            self.__logger.debug("Cache miss at (%r, %r)", c_x, c_eps)
            return None

        self.__logger.debug("Cache hit at (%r, %r)", c_x, c_eps)
        return float(row[0]), float(row[1])

    def put(self, run_key: str, c_x: float, c_eps: float, tc: float, iq: float) -> None:
        try:
            with connect(self.__path) as con:
                cursor = con.cursor()
                cursor.execute(
                    "INSERT OR REPLACE INTO surface(run_key, c_x, c_eps, tc, iq) "
                    "VALUES (?, ?, ?, ?, ?)",
                    (run_key, c_x, c_eps, tc, iq)
                )
                con.commit()
        except Error as e:
            self.__logger.error("Can't store grid point (%r, %r): %s", c_x, c_eps, e)

    def count(self, run_key: str) -> int:
        try:
            with connect(self.__path) as con:
                cursor = con.cursor()
                row = cursor.execute(
                    "SELECT COUNT(*) FROM surface WHERE run_key = ?", (run_key,)
                ).fetchone()
        except Error as e:
            self.__logger.error("Can't count cached grid points: %s", e)
            return 0

        return int(row[0])
